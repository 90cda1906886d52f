// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wilson and pair-clustered bootstrap intervals.

use plansite::stats::{cluster_bootstrap, wilson, BootstrapConfig, ClusterCount};

fn main() -> plansite::Result<()> {
    for (s, n) in [(67, 100), (0, 100), (1, 100), (18, 20)] {
        let w = wilson(s, n, 0.95)?;
        let (lo, hi) = w.percent_bounds();
        println!("wilson {s}/{n}: {:.0} [{lo}, {hi}]", w.point * 100.0);
    }
    let clusters = [(9, 20), (2, 20), (15, 20), (11, 20), (4, 20)].map(|(s, n)| ClusterCount::new(s, n));
    let b = cluster_bootstrap(&clusters, &BootstrapConfig::with_seed(1))?;
    println!(
        "cluster bootstrap over {} pairs: {:.3} [{:.3}, {:.3}] ({} resamples)",
        clusters.len(),
        b.point,
        b.lower,
        b.upper,
        b.n
    );
    Ok(())
}
