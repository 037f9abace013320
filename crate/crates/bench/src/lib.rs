//! Fixtures shared by the benchmarks.

use dpfnas_core::{
    generate_dataset, ArchitectureVariables, Batch, CandidateOpSet, CellGraph, GradientVector,
    SearchSpace, SyntheticDatasetSpec, WeightParameters,
};

/// Default-sized search space: 4 intermediate nodes, 16 inputs, 4 classes.
pub fn search_space() -> SearchSpace {
    SearchSpace::new(
        CellGraph::dense(4).unwrap(),
        CandidateOpSet::standard(),
        16,
        4,
    )
    .unwrap()
}

pub struct SupernetFixture {
    pub space: SearchSpace,
    pub arch: ArchitectureVariables,
    pub weights: WeightParameters,
    pub batch: Batch,
}

/// A supernet at initialization with a training batch of `n` rows.
pub fn supernet(n: usize) -> SupernetFixture {
    let space = search_space();
    let data = generate_dataset(&SyntheticDatasetSpec {
        per_class: n.div_ceil(2).max(8),
        ..Default::default()
    })
    .unwrap();
    let rows: Vec<usize> = (0..n.min(data.train.len())).collect();
    SupernetFixture {
        arch: space.init_arch(),
        weights: space.init_weights(0),
        batch: data.train.batch(&rows).unwrap(),
        space,
    }
}

/// Per-example weight gradients of the fixture batch.
pub fn per_example_gradients(f: &SupernetFixture) -> Vec<GradientVector> {
    use dpfnas_core::autodiff::per_sample_gradients;
    use dpfnas_core::nas::Supernet;
    use dpfnas_core::{ParamGroup, ParamSelector};
    let net = Supernet {
        space: &f.space,
        arch: &f.arch,
        weights: &f.weights,
    };
    per_sample_gradients(&net, &f.batch, &ParamSelector::Group(ParamGroup::Weights)).unwrap()
}
