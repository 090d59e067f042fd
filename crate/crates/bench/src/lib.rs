//! Fixtures shared by the benchmarks.

use ecm_core::{generate_dataset, ConsistencyModel, Dataset, GenOptions, Grid2D, Net, NetworkSpec, PdeKind};

/// Small Darcy dataset on an `n x n` grid.
pub fn darcy(n: usize, count: usize) -> Dataset {
    let grid = Grid2D::new(n).expect("valid grid");
    generate_dataset(PdeKind::Darcy, count, grid, 7, &GenOptions::default()).expect("dataset")
}

/// Untrained split-decoder model at desk width.
pub fn desk_model(n: usize) -> ConsistencyModel<Net> {
    let spec = NetworkSpec::SplitConv {
        n,
        widths: [16, 32, 64],
        temb_dim: 32,
        seed: 1,
    };
    ConsistencyModel::new(Net::build(&spec).expect("network"), 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecm_core::Network;

    #[test]
    fn fixtures_match_grid() {
        let d = darcy(16, 2);
        assert_eq!(d.len(), 2);
        assert_eq!(desk_model(16).net.state_shape(), vec![2, 16, 16]);
    }
}
