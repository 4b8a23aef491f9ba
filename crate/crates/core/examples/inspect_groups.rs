//! Which tokens share a window in each layer, for RS and IR head groups.
//!
//! ```bash
//! cargo run --release -p rsir --example inspect_groups
//! ```

use rsir::attention::HeadGroup;
use rsir::backbone::{Model, ModelConfig};
use rsir::harness::inspect::{inspect, load_input, InspectDump};
use rsir::SeedRng;

fn main() -> rsir::Result<()> {
    let cfg = ModelConfig::desk();
    let model = Model::<f32>::new(cfg.clone(), &mut SeedRng::new(0))?;
    let input = "synthetic:digits:eval";
    let image = load_input(input, 3, &cfg, None)?;

    let a = inspect(&model, image.clone(), 1, input, 3)?;
    let b = inspect(&model, image, 2, input, 3)?;
    for (ra, rb) in a.records.iter().zip(&b.records) {
        let same = ra.window_assignment == rb.window_assignment;
        println!(
            "{:14} {:?}  map mean {:+.3}  first windows {:?}  same across seeds: {}",
            ra.layer,
            ra.head_group,
            ra.sample_map.mean,
            &ra.window_assignment[0][..ra.window_assignment[0].len().min(8)],
            same
        );
        // The first IR layer sees the raw patch embedding, so its grouping is
        // a function of the image alone; later layers inherit RS randomness.
        if ra.layer == "stage1.block0" {
            assert_eq!(same, ra.head_group == HeadGroup::Ir);
        }
    }
    let json = a.to_json();
    assert_eq!(InspectDump::from_json(&json)?, a);
    println!("dump: {} records, {} bytes of JSON", a.records.len(), json.len());
    Ok(())
}
