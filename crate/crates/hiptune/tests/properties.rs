//! Randomized invariants: probability normalization, convolution
//! degeneracies against a naive oracle, prompt-averaging exactness,
//! manifest round-trips and metric/rank-oracle agreement.

use proptest::prelude::*;

use hiptune::app::cdc_conv;
use hiptune::dpi::weighted_level_prompt;
use hiptune::encoders::class_probs_plain;
use hiptune::evaluation::{compute_metrics, ThresholdPolicy};
use hiptune::manifest::{parse_manifest, save_manifest, Manifest, ManifestRecord, Split};
use hiptune::math::{softmax_slice, Tensor};
use hiptune::taxonomy::build_taxonomy;
use hiptune::vptree::{integrate_prompts, init_prompt_tree, PromptPath};

fn tensor_strategy(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    proptest::collection::vec(-2.0f64..2.0, n)
        .prop_map(move |data| Tensor::from_vec(&shape, data))
}

/// Naive zero-padded convolution, written independently of the production
/// im2col path.
fn naive_conv(grid: &Tensor, kernel: &Tensor) -> Tensor {
    let (h, w, cin) = (grid.shape()[0], grid.shape()[1], grid.shape()[2]);
    let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    let mut out = Tensor::zeros(&[h, w, cout]);
    for y in 0..h as isize {
        for x in 0..w as isize {
            for oc in 0..cout {
                let mut acc = 0.0;
                for ic in 0..cin {
                    for ky in 0..kh as isize {
                        for kx in 0..kw as isize {
                            let yy = y + ky - (kh as isize / 2);
                            let xx = x + kx - (kw as isize / 2);
                            if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += kernel.data()
                                [((oc * cin + ic) * kh + ky as usize) * kw + kx as usize]
                                * grid.data()[((yy as usize) * w + xx as usize) * cin + ic];
                        }
                    }
                }
                out.data_mut()[((y as usize) * w + x as usize) * cout + oc] = acc;
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cdc_theta_zero_equals_vanilla_convolution(
        grid in tensor_strategy(vec![6, 6, 2]),
        kernel in tensor_strategy(vec![3, 2, 3, 3]),
    ) {
        let got = cdc_conv(&grid, &kernel, 0.0).unwrap();
        let want = naive_conv(&grid, &kernel);
        prop_assert!(got.max_abs_diff(&want) < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probability_head_normalizes_and_ignores_scale(
        f in proptest::collection::vec(-3.0f64..3.0, 8),
        w1 in proptest::collection::vec(-3.0f64..3.0, 8),
        w2 in proptest::collection::vec(-3.0f64..3.0, 8),
        scale in 0.1f64..50.0,
    ) {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assume!(norm(&f) > 1e-6 && norm(&w1) > 1e-6 && norm(&w2) > 1e-6);
        let ft = Tensor::from_vec(&[8], f.clone());
        let ws = [Tensor::from_vec(&[8], w1), Tensor::from_vec(&[8], w2)];
        let p = class_probs_plain(&ft, &ws, 0.07).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let mut scaled = ft.clone();
        scaled.scale_in_place(scale);
        let p2 = class_probs_plain(&scaled, &ws, 0.07).unwrap();
        prop_assert!((p[0] - p2[0]).abs() < 1e-9);
    }

    #[test]
    fn softmax_shift_invariance_preserves_argmax(
        logits in proptest::collection::vec(-5.0f64..5.0, 2..6),
        shift in -100.0f64..100.0,
    ) {
        let base = softmax_slice(&logits);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let moved = softmax_slice(&shifted);
        prop_assert_eq!(hiptune::math::argmax(&base), hiptune::math::argmax(&moved));
        for (a, b) in base.iter().zip(&moved) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        prop_assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn prompt_integration_is_exact_mean_any_order(
        blocks in proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, 12), 3),
        weights in proptest::collection::vec(0.01f64..1.0, 3),
    ) {
        // integrate_prompts over a taxonomy path == coordinate mean.
        let tax = build_taxonomy();
        let mut tree = init_prompt_tree(&tax, 3, 4, 1).unwrap();
        let path = tax.path_for_method(5).unwrap();
        for (node, data) in [path.0, path.1, path.2].iter().zip(&blocks) {
            *tree.block_mut(*node).unwrap() = Tensor::from_vec(&[3, 4], data.clone());
        }
        let mean = integrate_prompts(&tree, &PromptPath::chain(path)).unwrap();
        for i in 0..12 {
            let want = (blocks[0][i] + blocks[1][i] + blocks[2][i]) / 3.0;
            prop_assert!((mean.data()[i] - want).abs() < 1e-12);
        }
        let perm = PromptPath { steps: vec![(2, path.1), (3, path.2), (1, path.0)] };
        let mean_perm = integrate_prompts(&tree, &perm).unwrap();
        prop_assert!(mean.max_abs_diff(&mean_perm) < 1e-12);

        // Weighted combination with normalized weights matches the direct sum.
        let total: f64 = weights.iter().sum();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let cands: Vec<Tensor> = blocks
            .iter()
            .map(|b| Tensor::from_vec(&[3, 4], b.clone()))
            .collect();
        let blended = weighted_level_prompt(&probs, &cands).unwrap();
        for i in 0..12 {
            let want: f64 = probs.iter().zip(&blocks).map(|(p, b)| p * b[i]).sum();
            prop_assert!((blended.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn manifest_round_trip(
        seeds in proptest::collection::vec((0u32..20, 0u16..54, proptest::bool::ANY), 1..40),
    ) {
        let tax = build_taxonomy();
        let records: Vec<ManifestRecord> = seeds
            .iter()
            .enumerate()
            .map(|(i, (identity, method, live))| {
                let path = (!live).then(|| tax.path_for_method(*method).unwrap());
                ManifestRecord {
                    file: format!("samples/{i:06}.bin"),
                    identity_id: *identity,
                    is_live: *live,
                    path,
                    method_id: (!live).then_some(*method),
                    split: if i % 3 == 0 { Split::Train } else { Split::Unassigned },
                }
            })
            .collect();
        let manifest = Manifest { records };
        manifest.validate(&tax).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        save_manifest(&manifest, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        prop_assert_eq!(parse_manifest(&text).unwrap(), manifest);
    }

    #[test]
    fn auc_matches_pairwise_oracle(
        raw in proptest::collection::vec((0.0f64..1.0, proptest::bool::ANY), 8..120),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| (s * 16.0).round() / 16.0).collect();
        let mut is_live: Vec<bool> = raw.iter().map(|(_, l)| *l).collect();
        is_live[0] = true;
        is_live[1] = false;
        let m = compute_metrics(&scores, &is_live, ThresholdPolicy::Fixed(0.5)).unwrap();
        let mut total = 0.0;
        let mut pairs = 0.0;
        for (sf, &lf) in scores.iter().zip(&is_live) {
            if lf {
                continue;
            }
            for (sl, &ll) in scores.iter().zip(&is_live) {
                if !ll {
                    continue;
                }
                pairs += 1.0;
                total += if sf > sl { 1.0 } else if sf == sl { 0.5 } else { 0.0 };
            }
        }
        prop_assert!((m.auc - total / pairs).abs() < 1e-12);
    }
}
