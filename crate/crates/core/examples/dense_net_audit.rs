//! Layer graph of the default classifier: growth rate per stage, who feeds
//! whom, and the shapes of one forward pass.
//!
//! cargo run --example dense_net_audit

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wcnet::net::{forward, LayerGraph, NetworkConfig, NetworkParams};
use wcnet::Tensor;

fn main() -> wcnet::Result<()> {
    let cfg = NetworkConfig {
        input: [30, 11, 11],
        ..NetworkConfig::default()
    };
    let g = LayerGraph::build(&cfg);
    println!("growth rates {:?}", cfg.growth_rates());
    for n in &g.nodes {
        println!(
            "  {:<12} stage {} extent {:?}: {:>4} channels in from {:>2} earlier nodes, {:>3} out",
            n.name,
            n.stage,
            cfg.stage_extent(n.stage),
            n.in_channels,
            n.inputs.len(),
            n.out_channels
        );
    }
    println!("head pools {} channels from {} nodes", g.head_channels, g.head_inputs.len());

    let p = NetworkParams::build(&cfg, 1)?;
    let [l, m, n] = cfg.input;
    let x = Tensor::uniform(&[2, 1, l, m, n], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let y = forward(&p, &cfg, &x)?;
    println!("{} trainable parameters; logits {:?}", p.trainable_count(), y.shape());
    Ok(())
}
