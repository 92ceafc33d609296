//! Temporary scaffold: scans parameter seeds for a kink-free gradcheck
//! point. Not part of the suite (ignored); run explicitly.

use contrastvae::model::{self, augment_data, Augmentation, ModelConfig, Parameters};
use contrastvae::numerics::{finite_difference_check, Tape, Tensor};
use contrastvae::objective::{self, ObjectiveSpec, ViewBatch};
use contrastvae::rng::SeedStream;

fn tiny_config(aug: Augmentation) -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        layers: 1,
        max_len: 4,
        dropout_p: 0.3,
        augmentation: aug,
        tau: 1.0,
        lambda: 0.1,
        ..ModelConfig::default()
    }
}

#[test]
#[ignore]
fn probe_seeds() {
    let seqs: Vec<Vec<u32>> = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8], vec![9, 10, 1, 2]];
    let refs: Vec<&[u32]> = seqs.iter().map(|s| s.as_slice()).collect();
    for scale in [15.0, 25.0] {
        for seed in 1..=12u64 {
            let mut worst_total = 0.0f64;
            let mut fails_total = 0usize;
            for aug in [
                Augmentation::Data,
                Augmentation::Model,
                Augmentation::Variational,
            ] {
                let config = tiny_config(aug);
                let mut params = Parameters::<f64>::init(&config, 10, seed).unwrap();
                for (name, tensor) in params.named_tensors_mut() {
                    if name.contains(".w_") || name.contains("ff_w") || name.ends_with("_emb") {
                        for v in tensor.values_mut() {
                            *v *= scale;
                        }
                    }
                }
                let view1 = ViewBatch::next_item_view(&refs, config.max_len);
                let view2 = if aug == Augmentation::Data {
                    let mut rng = SeedStream::derive(4242, &[0xDA]);
                    let augmented: Vec<Vec<u32>> = seqs
                        .iter()
                        .map(|s| {
                            augment_data(
                                s,
                                config.da_crop_eta,
                                config.da_mask_gamma,
                                config.da_reorder_rho,
                                &mut rng,
                            )
                        })
                        .collect();
                    let arefs: Vec<&[u32]> = augmented.iter().map(|s| s.as_slice()).collect();
                    ViewBatch::next_item_view(&arefs, config.max_len)
                } else {
                    view1.clone()
                };
                let spec = ObjectiveSpec::default();
                let branch_seeds = [911, 912];
                let mut tape = Tape::<f64>::new();
                let taped = model::register_params(&mut tape, &params);
                let out = objective::two_view_loss(
                    &mut tape,
                    &taped,
                    &config,
                    &spec,
                    &view1,
                    &view2,
                    branch_seeds,
                )
                .unwrap();
                tape.backward(out.total).unwrap();
                let grads: Vec<Vec<f64>> = taped
                    .ids_in_order()
                    .iter()
                    .map(|&id| tape.grad_or_zeros(id))
                    .collect();
                let named: Vec<(String, Tensor<f64>)> = params
                    .named_tensors()
                    .into_iter()
                    .map(|(n, t)| (n, t.clone()))
                    .collect();
                let mut scratch = params.clone();
                let eval = |entries: &[(String, Tensor<f64>)]| {
                    scratch.set_from_named(entries);
                    let mut tape = Tape::<f64>::new();
                    let taped = model::register_params(&mut tape, &scratch);
                    let out = objective::two_view_loss(
                        &mut tape,
                        &taped,
                        &config,
                        &spec,
                        &view1,
                        &view2,
                        branch_seeds,
                    )
                    .map_err(|e| contrastvae::numerics::TensorError::Usage(e.to_string()))?;
                    Ok(tape.scalar_value(out.total))
                };
                let report = finite_difference_check(&named, &grads, eval, 1e-3, 1e-4).unwrap();
                fails_total += report.failures.len();
                worst_total = worst_total.max(report.worst.map(|w| w.rel_err).unwrap_or(0.0));
            }
            println!(
                "scale {scale} seed {seed}: failures {fails_total}, worst {worst_total:.3e}"
            );
        }
    }
}
