//! Closed-form cost of a wavelet conv layer next to plain depthwise convs,
//! and the per-layer cost of a whole network.
//!
//! cargo run --example flops_report

use wcnet::cost::{depthwise_flops, model_cost, wt_flops, wtconv_flops, CostQuery, CostReport};
use wcnet::net::NetworkConfig;

fn main() -> wcnet::Result<()> {
    println!("7x7 depthwise, 512x512:   {:>12}", depthwise_flops(&CostQuery::square(1, 512, 7, 0)));
    println!("31x31 depthwise, 512x512: {:>12}", depthwise_flops(&CostQuery::square(1, 512, 31, 0)));
    let q = CostQuery::square(1, 512, 5, 3);
    println!("wavelet conv l=3 k=5:     {:>12}", wtconv_flops(&q));
    println!("transforms (wt + iwt):    {:>12}", 2 * wt_flops(&q));
    let layer = CostReport::wtconv(&q, true);
    println!("layer total:              {:>12}\n", layer.total_flops);

    for (name, cfg) in [
        ("desk", NetworkConfig::desk(5, [32, 9, 9])),
        ("default", NetworkConfig::default()),
    ] {
        let r = model_cost(&cfg)?;
        println!("{name}: {} MACs per patch, {} parameters", r.total_flops, r.total_params);
        for item in r.items.iter().filter(|i| i.flops > 0) {
            println!("  {:<28} {:>12} {:>9}", item.name, item.flops, item.params);
        }
    }
    Ok(())
}
