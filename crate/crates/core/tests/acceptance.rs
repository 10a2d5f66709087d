//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to run
//! a subset, e.g. `cargo test --test acceptance -- 4 5`.

use std::f64::consts::TAU;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fusad::data::{
    sliding_windows, stratified_split, synth_anomaly, synth_classification, synth_sine, BaseSignal,
    SeriesDataset, SpikeSpec, WindowSpec,
};
use fusad::fusion::{ifm_backward_check, IfmConfig, InformationFusionModule};
use fusad::layers::Conv1d;
use fusad::metrics::prf1;
use fusad::model::{Ablation, FusAD, FusADConfig, Task};
use fusad::spectral::mask::gate_on_tape;
use fusad::spectral::{adaptive_mask, fft, FrequencyRepr, MorletBank};
use fusad::tensor::gradcheck::check_gradients;
use fusad::tensor::kernels::gelu_scalar;
use fusad::tensor::{Padding, ParamStore, Tape, Tensor};
use fusad::training::{
    anomaly_scores, evaluate, finetune, label_smooth_ce, masked_mse, pretrain, MaskSpec,
    TrainConfig,
};

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- criterion 1

fn direct_dft(x: &[f64]) -> Vec<(f64, f64)> {
    let h = x.len();
    (0..h)
        .map(|k| {
            x.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &v)| {
                let a = -TAU * (k * n) as f64 / h as f64;
                (re + v * a.cos(), im + v * a.sin())
            })
        })
        .collect()
}

fn spectral_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut dft_err, mut parseval_err, mut trip_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let h = rng.random_range(1..=64);
        let x: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = fft::fft(&x);
        for (f, (re, im)) in fast.iter().zip(direct_dft(&x)) {
            dft_err = dft_err.max((f.re - re).abs()).max((f.im - im).abs());
        }
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq: f64 = fast.iter().map(|c| c.norm_sqr()).sum::<f64>() / h as f64;
        parseval_err = parseval_err.max((time - freq).abs() / time.max(1e-300));
        let back = fft::irfft(&fft::rfft(&x), h);
        for (a, b) in x.iter().zip(&back) {
            trip_err = trip_err.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = dft_err < 1e-9 && parseval_err < 1e-9 && trip_err < 1e-9 && secs < 5.0;
    Ok((
        ok,
        format!(
            "max |fft - dft| {dft_err:.2e}, Parseval rel {parseval_err:.2e}, round trip {trip_err:.2e}, {secs:.2}s"
        ),
    ))
}

// ---------------------------------------------------------------- criterion 2

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn tiny_model(task: Task) -> Result<FusAD, String> {
    let mut cfg = FusADConfig::new(16, 2, task);
    cfg.layers = 1;
    cfg.patch.patch_len = 4;
    cfg.patch.embed_dim = 3;
    cfg.spectral.num_scales = 3;
    let mut m = FusAD::new(cfg, 17).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // O(1) positional rows keep masked tokens away from the near-singular
    // region of the layer norm, where finite differences lose accuracy
    let pos = m.store.id("embed.pos").ok_or("missing embed.pos")?;
    let shape = m.store.value(pos).shape().to_vec();
    m.store.get_mut(pos).value = uniform(&shape, &mut rng);
    let x = uniform(&[3, 2, 16], &mut rng);
    m.calibrate(&x).map_err(err)?;
    Ok(m)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-4;
    let mut worst: Vec<(&str, f64)> = Vec::new();

    // conv1d
    {
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&[2, 8], &mut rng)).map_err(err)?;
        let k = s.add("k", uniform(&[4, 2, 3], &mut rng)).map_err(err)?;
        let b = s.add("b", uniform(&[4], &mut rng)).map_err(err)?;
        let w = uniform(&[4, 8], &mut rng);
        let r = check_gradients(&mut s, h, |t, s| {
            let y = t.param(s, x).conv1d(t.param(s, k), Some(t.param(s, b)), Padding::Same)?;
            Ok(y.mul(t.constant(w.clone()))?.sum())
        })
        .map_err(err)?;
        worst.push(("conv1d", r.max_rel_error));
    }
    // gelu
    {
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&[12], &mut rng)).map_err(err)?;
        let w = uniform(&[12], &mut rng);
        let r = check_gradients(&mut s, h, |t, s| Ok(t.param(s, x).gelu().mul(t.constant(w.clone()))?.sum()))
            .map_err(err)?;
        worst.push(("gelu", r.max_rel_error));
    }
    // layer norm
    {
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&[3, 5, 4], &mut rng)).map_err(err)?;
        let g = s.add("g", uniform(&[5], &mut rng)).map_err(err)?;
        let b = s.add("b", uniform(&[5], &mut rng)).map_err(err)?;
        let w = uniform(&[3, 5, 4], &mut rng);
        let r = check_gradients(&mut s, h, |t, s| {
            let y = t.param(s, x).layer_norm(t.param(s, g), t.param(s, b), 1)?;
            Ok(y.mul(t.constant(w.clone()))?.sum())
        })
        .map_err(err)?;
        worst.push(("layer_norm", r.max_rel_error));
    }
    // soft gate through rfft / irfft
    {
        let mut s = ParamStore::new();
        let x = s.add("x", uniform(&[2, 16], &mut rng)).map_err(err)?;
        let t1 = s.add("theta1", Tensor::scalar(-1.0)).map_err(err)?;
        let t2 = s.add("theta2", Tensor::scalar(0.5)).map_err(err)?;
        let w = uniform(&[2, 16], &mut rng);
        let r = check_gradients(&mut s, h, |t, s| {
            let spec = t.param(s, x).rfft()?;
            let g = gate_on_tape(t, spec, t.param(s, t1), t.param(s, t2), false, false, 0.5)?;
            Ok(g.irfft(16)?.mul(t.constant(w.clone()))?.sum())
        })
        .map_err(err)?;
        worst.push(("soft_gate", r.max_rel_error));
    }
    // IFM
    {
        let mut s = ParamStore::new();
        let ifm = InformationFusionModule::new(&mut s, "ifm", &IfmConfig::default(), 3, &mut rng)
            .map_err(err)?;
        let hin = uniform(&[2, 3, 9], &mut rng);
        let w = uniform(&[2, 3, 9], &mut rng);
        worst.push(("ifm", ifm_backward_check(&s, &ifm, &hin, &w).map_err(err)?));
    }
    // losses
    {
        let mut s = ParamStore::new();
        let p = s.add("pred", uniform(&[2, 6], &mut rng)).map_err(err)?;
        let target = uniform(&[2, 6], &mut rng);
        let lambda = Tensor::new(vec![2, 6], (0..12).map(|i| f64::from(i % 3 == 0)).collect())
            .map_err(err)?;
        let r = check_gradients(&mut s, h, |t, s| masked_mse(t.param(s, p), &target, &lambda))
            .map_err(err)?;
        worst.push(("masked_mse", r.max_rel_error));

        let mut s = ParamStore::new();
        let l = s.add("logits", uniform(&[4, 3], &mut rng)).map_err(err)?;
        let r = check_gradients(&mut s, h, |t, s| label_smooth_ce(t.param(s, l), &[0, 2, 1, 2], 0.1))
            .map_err(err)?;
        worst.push(("label_smooth_ce", r.max_rel_error));
    }
    // full model, classification and masked reconstruction
    {
        let model = tiny_model(Task::Classification { classes: 3 })?;
        let x = uniform(&[2, 2, 16], &mut rng);
        let mut store = model.store.clone();
        let r = check_gradients(&mut store, h, |t, s| {
            let mut m = model.clone();
            m.store = s.clone();
            let logits = m.forward(t, &x, true)?;
            label_smooth_ce(logits, &[1, 2], 0.1)
        })
        .map_err(err)?;
        worst.push(("model_cls", r.max_rel_error));

        let model = tiny_model(Task::Anomaly)?;
        let keep = Tensor::new(
            vec![4, 4, 1],
            (0..16).map(|i| f64::from(i % 4 != 1)).collect(),
        )
        .map_err(err)?;
        let lambda = fusad::training::timestep_weights(&keep, 16, 4).map_err(err)?;
        let mut store = model.store.clone();
        let r = check_gradients(&mut store, h, |t, s| {
            let mut m = model.clone();
            m.store = s.clone();
            let y = m.forward_head(t, &x, fusad::model::HeadKind::Reconstruction, Some(&keep), true)?;
            masked_mse(y, &x, &lambda)
        })
        .map_err(err)?;
        worst.push(("model_recon", r.max_rel_error));
    }
    let secs = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((max < 1e-4 && secs < 60.0, format!("{detail}; {secs:.1}s")))
}

// ---------------------------------------------------------------- criterion 3

fn conv_oracle(s: &ParamStore, conv: &Conv1d, x: &[f64], d: usize, z: usize) -> Vec<f64> {
    let w = s.value(conv.weight).data();
    let b = s.value(conv.bias).data();
    let k = conv.kernel;
    let rows = x.len() / (d * z);
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for co in 0..d {
            for t in 0..z {
                let mut acc = b[co];
                for ci in 0..d {
                    for j in 0..k {
                        let pos = t as isize + j as isize - (k / 2) as isize;
                        if pos >= 0 && (pos as usize) < z {
                            acc += w[(co * d + ci) * k + j] * x[(r * d + ci) * z + pos as usize];
                        }
                    }
                }
                out[(r * d + co) * z + t] = acc;
            }
        }
    }
    out
}

fn ifm_fidelity() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let d = rng.random_range(1..=4);
        let z = rng.random_range(3..=12);
        let b = rng.random_range(1..=3);
        let mut s = ParamStore::new();
        let cfg = IfmConfig::default();
        let ifm = InformationFusionModule::new(&mut s, "ifm", &cfg, d, &mut rng).map_err(err)?;
        let h = uniform(&[b, d, z], &mut rng);
        let tape = Tape::new();
        let got = ifm.forward(&tape, &s, tape.constant(h.clone())).map_err(err)?.value();

        let c = cfg.exp_clip;
        let x = h.data();
        let conv = |m: &Conv1d, v: &[f64]| conv_oracle(&s, m, v, d, z);
        let beta = conv(&ifm.beta, x);
        let alpha = conv(&ifm.alpha, x);
        let mut h1o = vec![0.0; x.len()];
        let mut h1c = vec![0.0; x.len()];
        for i in 0..x.len() {
            h1o[i] = x[i] * beta[i].clamp(-c, c).exp();
            h1c[i] = x[i] * alpha[i].clamp(-c, c).exp();
        }
        let nu = conv(&ifm.nu, &h1c);
        let mu = conv(&ifm.mu, &h1o);
        let mut h2o = vec![0.0; x.len()];
        let mut h2c = vec![0.0; x.len()];
        for i in 0..x.len() {
            h2o[i] = h1o[i] + nu[i];
            h2c[i] = h1c[i] - mu[i];
        }
        let rho = conv(&ifm.rho, &h2o);
        let omega = conv(&ifm.omega, &h2c);
        let mut fused = vec![0.0; x.len()];
        for i in 0..x.len() {
            let h3o = rho[i] * gelu_scalar(omega[i]);
            let h3c = omega[i] * gelu_scalar(rho[i]);
            fused[i] = h3o + h3c;
        }
        let out = conv(&ifm.out, &fused);
        for i in 0..x.len() {
            worst = worst.max((got.data()[i] - (out[i] + x[i])).abs());
        }
    }
    Ok((worst < 1e-10, format!("max deviation from oracle {worst:.2e} over 50 instances")))
}

// ---------------------------------------------------------------- criterion 4

fn snr_db(clean: &[f64], est: &[f64]) -> f64 {
    let sig: f64 = clean.iter().map(|v| v * v).sum();
    let noise: f64 = clean.iter().zip(est).map(|(a, b)| (a - b) * (a - b)).sum();
    10.0 * (sig / noise).log10()
}

fn denoising() -> Outcome {
    let h = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clean: Vec<f64> = (0..h).map(|t| (TAU * 10.0 * t as f64 / h as f64).sin()).collect();
    // unit-amplitude sine has power 1/2; matching noise variance gives 0 dB
    let noise = Tensor::randn(&[h], 0.5f64.sqrt(), &mut rng);
    let noisy: Vec<f64> = clean.iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    let x = Tensor::from_vec(noisy.clone());
    let repr = FrequencyRepr::from_signal(&x, false).map_err(err)?;
    let lp = repr.log_power();
    let tone = lp.data()[10];
    let floor = lp
        .data()
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != 10)
        .map(|(_, &v)| v)
        .fold(f64::MIN, f64::max);
    let (t1, t2) = ((tone + floor) / 2.0, tone + 1.0);
    let kept = adaptive_mask(&repr, t1, t2, true, 0.1).map_err(err)?;
    let out = fft::irfft_tensor(&kept, h).map_err(err)?;
    let before = snr_db(&clean, &noisy);
    let after = snr_db(&clean, out.data());

    let all = adaptive_mask(&repr, -1e6, 1e6, true, 0.1).map_err(err)?;
    let passthrough = fft::irfft_tensor(&all, h).map_err(err)?;
    let trip = passthrough.max_abs_diff(&x);
    Ok((
        after - before >= 10.0 && trip < 1e-9,
        format!(
            "SNR {before:.2} dB -> {after:.2} dB (+{:.2}), all-pass deviation {trip:.1e}",
            after - before
        ),
    ))
}

// ---------------------------------------------------------------- criterion 5

fn cwt_oracle() -> Outcome {
    let z = 256;
    let omega0 = 6.0;
    let bank = MorletBank::with_default_scales(z, 40, omega0).map_err(err)?;
    let scales = bank.scales().to_vec();
    let step = (scales[1] / scales[0]).ln();
    let mut details = Vec::new();
    let mut ok = true;
    for period in [6.0, 12.0, 20.0, 32.0, 48.0] {
        let w = TAU / period;
        let x = Tensor::from_vec((0..z).map(|t| (w * t as f64).cos()).collect());
        let mag = bank.cwt(&x).map_err(err)?.magnitude();
        let energy: Vec<f64> = (0..scales.len())
            .map(|s| mag.data()[s * z + z / 4..s * z + 3 * z / 4].iter().sum())
            .collect();
        let peak = (0..scales.len())
            .max_by(|&a, &b| energy[a].total_cmp(&energy[b]))
            .unwrap();
        let dist = (scales[peak].ln() - (omega0 / w).ln()).abs() / step;
        ok &= dist <= 1.0;
        details.push(format!("p={period}: {dist:.2} steps"));
    }
    let mut worst_corr = 1.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let p1 = rng.random_range(8.0..20.0);
        let p2 = rng.random_range(25.0..60.0);
        let ph = rng.random_range(0.0..TAU);
        let x: Vec<f64> = (0..z)
            .map(|t| (TAU * t as f64 / p1).sin() + 0.7 * (TAU * t as f64 / p2 + ph).cos())
            .collect();
        let y = bank.icwt(&bank.cwt(&Tensor::from_vec(x.clone())).map_err(err)?).map_err(err)?;
        worst_corr = worst_corr.min(correlation(&x, y.data()));
    }
    ok &= worst_corr > 0.95;
    Ok((ok, format!("{}; min reconstruction corr {worst_corr:.4}", details.join(", "))))
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

// ---------------------------------------------------------------- criterion 6

fn sine_corpus(samples: usize, n: usize, len: usize, sigma: f64, seed: u64) -> Result<SeriesDataset, String> {
    let stride = 4;
    let series = synth_sine(len + (samples - 1) * stride, n, 24.0, sigma, seed).map_err(err)?;
    sliding_windows(
        &series,
        &WindowSpec {
            lookback: len,
            horizon: 0,
            stride,
        },
    )
    .map_err(err)
}

fn pretrain_config() -> FusADConfig {
    let mut cfg = FusADConfig::new(96, 2, Task::Anomaly);
    cfg.patch.patch_len = 8;
    cfg.patch.embed_dim = 32;
    cfg.layers = 2;
    cfg
}

fn desk_train(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        epochs_pretrain: Some(30),
        seed,
        ..TrainConfig::default()
    }
}

fn pretraining_descent() -> Outcome {
    let start = Instant::now();
    let data = sine_corpus(200, 2, 96, 0.1, 6)?;
    let mut model = FusAD::new(pretrain_config(), 6).map_err(err)?;
    let trace = pretrain(&mut model, &data, &MaskSpec::default(), &desk_train(6)).map_err(err)?;
    let first = trace[0].loss;
    let last = trace.last().unwrap().loss;
    let secs = start.elapsed().as_secs_f64();
    Ok((
        last < 0.5 * first && secs < 600.0,
        format!("epoch 1 loss {first:.4}, epoch 30 loss {last:.4} (ratio {:.3}), {secs:.1}s", last / first),
    ))
}

// ---------------------------------------------------------------- criterion 7

fn classification_run(ablation: Ablation, train: &SeriesDataset, test: &SeriesDataset) -> Result<f64, String> {
    let mut cfg = FusADConfig::new(train.seq_len(), 1, Task::Classification { classes: 2 });
    cfg.patch.embed_dim = 16;
    cfg.ablation = ablation;
    let mut model = FusAD::new(cfg, 7).map_err(err)?;
    let tc = TrainConfig {
        lr_finetune: 1e-3,
        batch_size: 16,
        epochs_finetune: Some(50),
        seed: 7,
        ..TrainConfig::default()
    };
    finetune(&mut model, train, test, &MaskSpec::default(), &tc).map_err(err)?;
    let report = evaluate(&model, test, None, 64).map_err(err)?;
    Ok(report.get("accuracy").unwrap())
}

fn toy_classification() -> Outcome {
    let ds = synth_classification(60, 64, &[3.0, 6.0], 0.5, 7).map_err(err)?;
    let (tr, te) = stratified_split(&ds, 0.8, 7).map_err(err)?;
    let (train, test) = (ds.subset(&tr), ds.subset(&te));
    let full = classification_run(Ablation::default(), &train, &test)?;
    let no_asm = classification_run(
        Ablation {
            no_asm: true,
            ..Ablation::default()
        },
        &train,
        &test,
    )?;
    Ok((
        full >= 0.95 && no_asm <= full,
        format!("test accuracy full {full:.3}, no_asm {no_asm:.3}"),
    ))
}

// ---------------------------------------------------------------- criterion 8

fn forecast_split(sigma: f64, seed: u64) -> Result<(SeriesDataset, SeriesDataset), String> {
    let series = synth_sine(1200, 1, 24.0, sigma, seed).map_err(err)?;
    let (train, test) = series.split_at(960).map_err(err)?;
    let spec = WindowSpec {
        lookback: 96,
        horizon: 16,
        stride: 2,
    };
    Ok((
        sliding_windows(&train, &spec).map_err(err)?,
        sliding_windows(&test, &WindowSpec { stride: 4, ..spec }).map_err(err)?,
    ))
}

fn forecast_run(ablation: Ablation, train: &SeriesDataset, test: &SeriesDataset) -> Result<f64, String> {
    let mut cfg = FusADConfig::new(96, 1, Task::Forecasting { horizon: 16 });
    cfg.patch.embed_dim = 16;
    cfg.ablation = ablation;
    let mut model = FusAD::new(cfg, 8).map_err(err)?;
    let tc = TrainConfig {
        lr_finetune: 1e-3,
        batch_size: 32,
        epochs_finetune: Some(20),
        seed: 8,
        ..TrainConfig::default()
    };
    finetune(&mut model, train, train, &MaskSpec::default(), &tc).map_err(err)?;
    let report = evaluate(&model, test, None, 64).map_err(err)?;
    Ok(report.get("mse").unwrap())
}

fn last_value_mse(test: &SeriesDataset) -> f64 {
    let idx: Vec<usize> = (0..test.len()).collect();
    let x = test.stack_inputs(&idx).unwrap();
    let y = test.futures(&idx).unwrap();
    let (t, h) = (x.shape()[2], y.shape()[2]);
    let mut se = 0.0;
    for (row, fut) in x.data().chunks(t).zip(y.data().chunks(h)) {
        se += fut.iter().map(|v| (v - row[t - 1]).powi(2)).sum::<f64>();
    }
    se / y.len() as f64
}

fn toy_forecasting() -> Outcome {
    let (train, test) = forecast_split(0.0, 8)?;
    let clean = forecast_run(Ablation::default(), &train, &test)?;
    let naive = last_value_mse(&test);
    // the ablation gap is small next to seed-to-seed spread, so compare means over data seeds
    let (mut full, mut no_thr, mut per_seed) = (0.0, 0.0, Vec::new());
    let seeds = [9u64, 10, 11];
    for seed in seeds {
        let (ntrain, ntest) = forecast_split(0.3, seed)?;
        let f = forecast_run(Ablation::default(), &ntrain, &ntest)?;
        let a = forecast_run(
            Ablation {
                no_asm_threshold: true,
                ..Ablation::default()
            },
            &ntrain,
            &ntest,
        )?;
        full += f / seeds.len() as f64;
        no_thr += a / seeds.len() as f64;
        per_seed.push(format!("{f:.4}/{a:.4}"));
    }
    Ok((
        clean < naive && full <= no_thr,
        format!(
            "clean MSE {clean:.4} vs last-value {naive:.4}; noisy mean full {full:.4} vs no_asm_threshold {no_thr:.4} (per seed {})",
            per_seed.join(", ")
        ),
    ))
}

// ---------------------------------------------------------------- criterion 9

fn spike_series(len: usize, spikes: usize, seed: u64) -> Result<fusad::data::AnomalySeries, String> {
    synth_anomaly(
        len,
        &BaseSignal {
            period: 24.0,
            amplitude: 1.0,
            noise: 0.1,
        },
        &SpikeSpec {
            count: spikes,
            positions: vec![],
            amplitude_sigma: 10.0,
            level_shifts: 0,
            shift_len: 1,
        },
        seed,
    )
    .map_err(err)
}

fn windows(series: &fusad::data::Series) -> Result<SeriesDataset, String> {
    sliding_windows(
        series,
        &WindowSpec {
            lookback: 96,
            horizon: 0,
            stride: 96,
        },
    )
    .map_err(err)
}

fn toy_anomaly() -> Outcome {
    let train = windows(&spike_series(96 * 40, 0, 90)?.series)?;
    let calib = windows(&spike_series(96 * 20, 0, 91)?.series)?;
    let mut cfg = FusADConfig::new(96, 1, Task::Anomaly);
    cfg.patch.embed_dim = 16;
    cfg.anomaly_percentile = 100.0;
    let mut model = FusAD::new(cfg, 9).map_err(err)?;
    let tc = TrainConfig {
        batch_size: 16,
        epochs_pretrain: Some(30),
        seed: 9,
        ..TrainConfig::default()
    };
    pretrain(&mut model, &train, &MaskSpec::default(), &tc).map_err(err)?;

    let test_series = spike_series(96 * 10, 6, 92)?;
    let test = windows(&test_series.series)?;
    let report = evaluate(&model, &test, Some(&calib), 64).map_err(err)?;
    let f1 = report.get("f1").unwrap();

    let mut hits = 0;
    for seed in 0..20 {
        let s = spike_series(96, 1, 1000 + seed)?;
        let scores = anomaly_scores(&model, &windows(&s.series)?, 8).map_err(err)?;
        let top = (0..scores.len())
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
            .unwrap();
        if s.injections.iter().any(|inj| inj.start == top) {
            hits += 1;
        }
    }
    let raw = prf1(
        &report
            .per_sample
            .iter()
            .map(|&s| u8::from(s > report.get("threshold").unwrap()))
            .collect::<Vec<_>>(),
        test_series.series.labels.as_ref().unwrap(),
        false,
    )
    .map_err(err)?;
    Ok((
        f1 >= 0.9 && hits >= 19,
        format!(
            "point-adjusted F1 {f1:.3} (raw {:.3}), top-1 hits {hits}/20",
            raw.f1
        ),
    ))
}

// ---------------------------------------------------------------- criterion 10

fn mask_ratio_sweep() -> Outcome {
    let data = sine_corpus(64, 1, 96, 0.1, 10)?;
    let mut lines = Vec::new();
    let mut ok = true;
    for ratio in [0.1, 0.25, 0.35] {
        let mut cfg = FusADConfig::new(96, 1, Task::Anomaly);
        cfg.patch.embed_dim = 16;
        let mut model = FusAD::new(cfg, 10).map_err(err)?;
        let mask = MaskSpec {
            ratio,
            ..MaskSpec::default()
        };
        let tc = TrainConfig {
            batch_size: 16,
            epochs_pretrain: Some(5),
            seed: 10,
            ..TrainConfig::default()
        };
        let trace = pretrain(&mut model, &data, &mask, &tc).map_err(err)?;
        let last = trace.last().unwrap().loss;
        ok &= last.is_finite();
        lines.push(format!("ratio {ratio}: final loss {last:.4}"));
    }
    Ok((ok, lines.join(", ")))
}

// ---------------------------------------------------------------- criterion 11

fn determinism_and_persistence() -> Outcome {
    let data = sine_corpus(32, 2, 96, 0.1, 11)?;
    let run = || -> Result<(Vec<f64>, FusAD), String> {
        let mut cfg = pretrain_config();
        cfg.patch.embed_dim = 8;
        let mut m = FusAD::new(cfg, 11).map_err(err)?;
        let tc = TrainConfig {
            batch_size: 8,
            epochs_pretrain: Some(3),
            seed: 11,
            ..TrainConfig::default()
        };
        let t = pretrain(&mut m, &data, &MaskSpec::default(), &tc).map_err(err)?;
        Ok((t.iter().map(|r| r.loss).collect(), m))
    };
    let (a, model) = run()?;
    let (b, _) = run()?;
    let same_trace = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("m.ckpt");
    model.save(&path).map_err(err)?;
    let back = FusAD::load(&path).map_err(err)?;
    let bit_exact = model
        .store
        .iter()
        .zip(back.store.iter())
        .all(|((_, p), (_, q))| {
            p.name == q.name
                && p.value.data().iter().zip(q.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });

    let base = FusADConfig::new(96, 2, Task::Classification { classes: 3 });
    let mut accounted = true;
    let full = FusAD::new(base.clone(), 0).map_err(err)?.num_scalars();
    accounted &= full == base.expected_num_scalars();
    let d = base.patch.embed_dim;
    let per_layer_asm = 2 * d * d + d + 2;
    type Expectation = (fn(&mut Ablation), usize);
    let expectations: [Expectation; 6] = [
        (|a| a.no_asm = true, base.layers * per_layer_asm),
        (|a| a.no_asm_fourier = true, base.layers * (d * d + 2)),
        (|a| a.no_asm_threshold = true, base.layers * 2),
        (|a| a.no_asm_wavelet = true, base.layers * d * d),
        (|a| a.no_ifm = true, base.layers * base.ifm.num_scalars(d)),
        (|a| a.no_pretrain = true, 0),
    ];
    for (set, drop) in expectations {
        let mut cfg = base.clone();
        set(&mut cfg.ablation);
        let n = FusAD::new(cfg.clone(), 0).map_err(err)?.num_scalars();
        accounted &= full - n == drop && n == cfg.expected_num_scalars();
    }
    Ok((
        same_trace && bit_exact && accounted,
        format!("identical traces {same_trace}, bit-exact checkpoint {bit_exact}, ablation accounting {accounted}"),
    ))
}

// ---------------------------------------------------------------- runner

fn main() {
    let criteria: [Criterion; 11] = [
        ("spectral correctness", spectral_correctness),
        ("gradient suite", gradient_suite),
        ("IFM fidelity", ifm_fidelity),
        ("denoising", denoising),
        ("CWT oracle", cwt_oracle),
        ("pretraining descent", pretraining_descent),
        ("toy classification", toy_classification),
        ("toy forecasting", toy_forecasting),
        ("toy anomaly", toy_anomaly),
        ("mask-ratio sweep", mask_ratio_sweep),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match run() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "criterion {n:>2} [{}] {name}: {detail} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
