#![allow(dead_code)]

use duplex_core::config::ModelConfig;
use duplex_core::model::{ModelDims, Retriever};
use duplex_core::tensor::{Graph, Var};
use duplex_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One line per acceptance criterion, easy to grep from the test log.
pub fn report(n: usize, name: &str, pass: bool, detail: &str) {
    println!("acceptance criterion {n} ({name}): {} | {detail}", if pass { "PASS" } else { "FAIL" });
}

pub fn tiny_retriever(vocab: usize, d: usize, max_len: usize, dense_dim: usize, seed: u64) -> Retriever<f64> {
    let dims = ModelDims { n_layers: 1, d, n_heads: 2, d_ff: 2 * d, vocab, max_len, decoder_heads: 1, dense_dim };
    // A larger init scale than training uses, so every gradient path is
    // well above finite-difference noise.
    let cfg = ModelConfig { init_std: 0.3, ..ModelConfig::default() };
    Retriever::init(dims, &cfg, seed).unwrap()
}

/// `[CLS]` followed by `len - 1` ordinary ids below `vocab`.
pub fn random_seq(rng: &mut ChaCha8Rng, vocab: u32, len: usize) -> Vec<u32> {
    std::iter::once(duplex_core::text::CLS).chain((1..len).map(|_| rng.gen_range(5..vocab))).collect()
}

/// Worst norm-wise relative error, over parameter tensors, between the
/// tape gradient of `loss` and central differences.
pub fn param_grad_error(model: &Retriever<f64>, loss: &dyn Fn(&mut Graph<f64>, &Retriever<f64>) -> Result<Var>) -> f64 {
    let mut m = model.clone();
    m.params.set_trainable(|_| true);
    m.params.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, &m).unwrap();
    g.backward(l, &mut m.params).unwrap();

    let value = |probe: &Retriever<f64>| -> f64 {
        let mut g = Graph::new();
        let l = loss(&mut g, probe).unwrap();
        g.scalar(l).unwrap()
    };
    let eps = 1e-6;
    let ids: Vec<_> = m.params.ids().collect();
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = m.params.get(id).grad.clone().unwrap_or_default();
        let n = m.params.get(id).numel();
        let mut numeric = vec![0.0; n];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x = probe.params.get(id).data()[j];
            probe.params.get_mut(id).data_mut()[j] = x + eps;
            let plus = value(&probe);
            probe.params.get_mut(id).data_mut()[j] = x - eps;
            let minus = value(&probe);
            probe.params.get_mut(id).data_mut()[j] = x;
            *slot = (plus - minus) / (2.0 * eps);
        }
        let analytic = if analytic.is_empty() { vec![0.0; n] } else { analytic };
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale > 1e-7 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}
