//! Sample maps, permutation plans, shuffle/restore and window partitions.
//!
//! ```bash
//! cargo run -p rsir --example permutation_plans
//! ```

use rsir::permwin::{
    importance_sample_map, plan_from_map, restore, shuffle, uniform_sample_map, window_partition, window_reverse,
};
use rsir::{SeedRng, Tape, Tensor};

fn main() -> rsir::Result<()> {
    let mut rng = SeedRng::new(7);

    // RS-Win: a uniform map gives a random grouping.
    let map = uniform_sample_map(1, 8, &mut rng)?;
    let plan = plan_from_map(&map);
    println!("uniform scores   {:.3?}", map.row(0));
    println!("ids_shuffle      {:?}", plan.ids_shuffle());
    println!("ids_restore      {:?}", plan.ids_restore());
    println!("window (w = 4)   {:?}", plan.window_assignment(4));

    // IR-Win: channel means rank the tokens; high-importance tokens share a window.
    let x = Tensor::<f64>::randn(&[1, 8, 3], 1.0, &mut rng);
    let imp = importance_sample_map(&x)?;
    let ir = plan_from_map(&imp);
    println!("importance       {:.3?}", imp.row(0));
    println!("ir window        {:?}", ir.window_assignment(4));

    // The full shuffle → partition → reverse → restore path is the identity.
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let windows = window_partition(shuffle(v, &plan)?, 4)?;
    println!("windows shape    {:?}", windows.shape());
    let back = restore(window_reverse(windows, 4, 8, 1)?, &plan)?;
    println!("round trip error {:e}", back.to_tensor().max_abs_diff(&x));
    Ok(())
}
