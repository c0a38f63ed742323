//! Scratch harness for tuning the synthetic-check hyperparameters.

use mixrec_core::dataset::{build_graph, InteractionDataset};
use mixrec_core::eval::evaluate;
use mixrec_core::seeded_rng;
use mixrec_core::trainer::{train, TrainConfig};
use rand::Rng;

fn block_dataset(
    num_users: usize,
    num_items: usize,
    blocks: usize,
    p_in: f64,
    p_out: f64,
    test_fraction: f64,
    seed: u64,
) -> InteractionDataset {
    let mut rng = seeded_rng(seed);
    let user_block = |u: usize| u * blocks / num_users;
    let item_block = |i: usize| i * blocks / num_items;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for u in 0..num_users {
        let mut items = Vec::new();
        for i in 0..num_items {
            let p = if user_block(u) == item_block(i) { p_in } else { p_out };
            if rng.random_range(0.0..1.0) < p {
                items.push(i as u32);
            }
        }
        if items.is_empty() {
            let lo = user_block(u) * num_items / blocks;
            items.push((lo + rng.random_range(0..num_items / blocks)) as u32);
        }
        for k in (1..items.len()).rev() {
            let swap = rng.random_range(0..=k);
            items.swap(k, swap);
        }
        let n_test = ((items.len() as f64) * test_fraction).floor() as usize;
        let n_test = n_test.min(items.len() - 1);
        let cut = items.len() - n_test;
        for &i in &items[..cut] {
            train.push((u as u32, i));
        }
        for &i in &items[cut..] {
            test.push((u as u32, i));
        }
    }
    InteractionDataset::from_pairs(num_users, num_items, train, test).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lambda1: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(30);
    let no_im: bool = args.get(4).map(|s| s == "no_im").unwrap_or(false);

    let ds = block_dataset(200, 300, 10, 0.3, 0.01, 0.2, 777);
    let graph = build_graph(&ds);
    println!(
        "train={} test={} lambda1={} lr={} epochs={} no_im={}",
        ds.train.len(),
        ds.test.len(),
        lambda1,
        lr,
        epochs,
        no_im
    );
    for seed in 0..3 {
        let cfg = TrainConfig {
            batch_size: 128,
            embed_dim: 16,
            layers: 2,
            tau: 0.2,
            alpha: 0.1,
            lambda1,
            lambda2: 1e-4,
            learning_rate: lr,
            max_epochs: epochs,
            patience: 100,
            eval_every: 1,
            seed,
            no_im,
            ..TrainConfig::default()
        };
        let t0 = std::time::Instant::now();
        let out = train(&ds, &cfg).unwrap();
        let res = evaluate(&out.table, &graph, &ds, cfg.layers, cfg.include_layer0, 20).unwrap();
        let traj: Vec<String> = out
            .log
            .iter()
            .step_by(3)
            .map(|r| format!("{:.3}", r.recall20.unwrap_or(0.0)))
            .collect();
        println!(
            "seed {seed}: best {:.4} ({:.1}s) traj {}",
            res.mean_recall,
            t0.elapsed().as_secs_f64(),
            traj.join(" ")
        );
    }
}
