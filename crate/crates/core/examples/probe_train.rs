//! Scratch driver for hyperparameter calibration on the planted-regime set.

use std::time::Instant;

use stclust_core::model::ModelConfig;
use stclust_core::synth::{adjusted_rand_index, generate, RegimeSpec};
use stclust_core::train::{embeddings_full, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |name: &str, default: f64| -> f64 {
        args.iter()
            .position(|a| a == name)
            .and_then(|i| args.get(i + 1))
            .and_then(|v| v.parse().ok())
            .unwrap_or(default)
    };

    let spec = RegimeSpec {
        n_regimes: 3,
        segment_lengths: RegimeSpec::even_segments(3, 120),
        lon_len: 16,
        lat_len: 16,
        n_vars: 3,
        noise_sigma: get("--noise", 0.1),
        missing_rate: 0.0,
        seed: get("--seed", 42.0) as u64,
    };
    let (dataset, truth) = generate(&spec).unwrap();
    let dataset = dataset.impute_mean().unwrap().minmax_normalize().unwrap();

    let model_cfg = ModelConfig {
        channel_capacities: [
            get("--c1", 8.0) as usize,
            get("--c2", 16.0) as usize,
            get("--c3", 32.0) as usize,
            get("--c4", 64.0) as usize,
        ],
        latent_dim: get("--latent", 32.0) as usize,
        knn_k: 3,
        bilstm_hidden: get("--hidden", 64.0) as usize,
        n_clusters: 3,
        alpha: 1.0,
        window_length: get("--window", 8.0) as usize,
        attention_heads: 1,
        attention_dim: 16,
    };
    let train_cfg = TrainConfig {
        eta: get("--eta", 0.05),
        mu: get("--mu", 0.9),
        lambda: get("--lambda", 0.1),
        update_interval: get("--interval", 20.0) as u64,
        tol: 0.01,
        patience: 3,
        max_iters: get("--iters", 400.0) as u64,
        batch_size: get("--batch", 2.0) as usize,
        seed: get("--seed", 42.0) as u64,
        checkpoint_every: 0,
        pretrain_steps: get("--pretrain", 200.0) as u64,
    };

    let start = Instant::now();
    match train(&dataset, &model_cfg, &train_cfg, None) {
        Ok(out) => {
            let ari = adjusted_rand_index(&out.cluster.labels, &truth);
            // diagnostics: is the latent organized by regime or by
            // position-in-window?
            let seq = dataset.to_sequence_tensor(model_cfg.window_length).unwrap();
            let emb = embeddings_full(&out.state, &seq).unwrap();
            let km = stclust_core::eval::kmeans_cluster(&emb, 3, 0).unwrap();
            let ari_regime = adjusted_rand_index(km.labels(), &truth);
            let wpos = model_cfg.window_length.min(12);
            let pos_labels: Vec<usize> = (0..120).map(|t| t % model_cfg.window_length).collect();
            let km_pos = stclust_core::eval::kmeans_cluster(&emb, wpos, 0).unwrap();
            let pos_coarse: Vec<usize> = pos_labels.iter().map(|&p| p * wpos / model_cfg.window_length).collect();
            let ari_pos = adjusted_rand_index(km_pos.labels(), &pos_coarse);
            eprintln!("diag: kmeans3-vs-regime ARI={ari_regime:.3}  kmeans-vs-position ARI={ari_pos:.3}");
            let first_rec = out.log.steps.first().map(|s| s.l_rec).unwrap_or(f64::NAN);
            let last_rec = out.log.steps.last().map(|s| s.l_rec).unwrap_or(f64::NAN);
            eprintln!(
                "ari={ari:.4} steps={} elapsed={:.1}s l_rec {first_rec:.5} -> {last_rec:.5} halted={} deltas={:?}",
                out.final_step,
                start.elapsed().as_secs_f64(),
                out.log.halted_by_tolerance,
                out.cluster.delta_history
            );
        }
        Err(e) => eprintln!("train error after {:.1}s: {e}", start.elapsed().as_secs_f64()),
    }
}
