//! Benchmarks live in `benches/`; run them with `cargo bench -p fakescope-bench`.

use fakescope_core::data::{DatasetIndex, Label, SampleRecord, Split};

/// A train-only index with the given class sizes and no images behind it.
pub fn synthetic_index(real: usize, fake: usize) -> DatasetIndex {
    let rec = |label: Label, i: usize| SampleRecord {
        id: format!("{}/{i}", label.name()),
        path: format!("{}/{i}.png", label.name()).into(),
        label,
        split: Split::Train,
    };
    let records = (0..real)
        .map(|i| rec(Label::Real, i))
        .chain((0..fake).map(|i| rec(Label::Fake, i)))
        .collect();
    DatasetIndex::new(records).expect("ids are unique")
}
