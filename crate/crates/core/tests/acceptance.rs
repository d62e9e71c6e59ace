//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use hashjscc::channel::{awgn, normalize_power, snr_to_noise_variance};
use hashjscc::data::{gather, make_synthetic, ImageDataset, InMemoryDataset, SYNTHETIC_N_CLS};
use hashjscc::dhd::{
    bce_q_loss, hash_proxy_loss, sdh_loss, train_dhd, DhdConfig, DhdModule, DhdObjective, DhdTrainConfig,
    HashVector, TransformPair,
};
use hashjscc::image::ImageTensor;
use hashjscc::jscc::JsccConfig;
use hashjscc::metrics::psnr;
use hashjscc::relay::{collect_channel_outputs, ChainSpec, DfChain, QfPipeline};
use hashjscc::seed::{self, Stream};
use hashjscc::training::{composite_loss_tensor, hash_path_gradients, train_df_system, DfTrainer, TrainConfig, TrainMode};
use hashjscc::vq::{bits_per_pixel, fit_codebook, QuantRate};
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = anyhow::Result<(bool, String)>;

fn rate_arithmetic() -> Check {
    let expected = [Ratio::new(3, 2), Ratio::from(2), Ratio::new(5, 2), Ratio::from(3), Ratio::from(4)];
    let pairs = [(4, Ratio::new(3, 4)), (2, Ratio::from(1)), (4, Ratio::new(5, 4)), (2, Ratio::new(3, 2)), (2, Ratio::from(2))];
    let mut got = Vec::new();
    for (n_q, b) in pairs {
        got.push(bits_per_pixel(65536, n_q, b, 256, 256)?);
    }
    let sweep: Vec<_> = QuantRate::sweep().iter().map(|r| r.bpp(65536, 256, 256)).collect::<Result<_, _>>()?;
    let pass = got == expected && sweep == expected;
    Ok((pass, format!("bpp = {}", got.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(", "))))
}

fn channel_statistics() -> Check {
    let k = 65536;
    let mut worst_db: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for snr in [-5.0, -10.0, -15.0] {
        let sigma_sq = snr_to_noise_variance(snr)?;
        let (mut sum_sq, mut count) = (0.0, 0usize);
        for s in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
            let raw: Vec<f64> = (0..2 * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = normalize_power(&raw)?;
            let y = awgn(&x, sigma_sq, s)?;
            let noise: f64 = x.as_slice().iter().zip(y.as_slice()).map(|(a, b)| (b - a).powi(2)).sum();
            let empirical = 10.0 * (x.energy() / noise).log10();
            worst_db = worst_db.max((empirical - snr).abs());
            sum_sq += noise;
            count += 2 * k;
        }
        let per_component = sum_sq / count as f64;
        worst_var = worst_var.max((per_component / (sigma_sq / 2.0) - 1.0).abs());
    }
    Ok((
        worst_db <= 0.15 && worst_var <= 0.01,
        format!("max |SNR error| = {worst_db:.4} dB (tol 0.15), max rel. variance error = {:.3}% (tol 1%)", worst_var * 100.0),
    ))
}

fn random_hash(rng: &mut ChaCha8Rng, n: usize) -> anyhow::Result<HashVector> {
    Ok(HashVector::new((0..n).map(|_| rng.random_range(-0.999..0.999)).collect())?)
}

fn oracle_bce_q(h: &[f64], sigma_g: f64) -> f64 {
    let mut total = 0.0;
    for &v in h {
        let g_pos = (-(v - 1.0) * (v - 1.0) / (2.0 * sigma_g * sigma_g)).exp();
        let g_neg = (-(v + 1.0) * (v + 1.0) / (2.0 * sigma_g * sigma_g)).exp();
        let b_pos = 0.5 * (v.signum() + 1.0);
        let b_neg = 1.0 - b_pos;
        let hb = |u: f64, p: f64| -u * p.log2() - (1.0 - u) * (1.0 - p).log2();
        total += hb(b_pos, g_pos) + hb(b_neg, g_neg);
    }
    total / h.len() as f64
}

fn oracle_hash_proxy(c: &[u8], h: &[f64], proxies: &[Vec<f64>], tau: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let p_t: Vec<f64> = proxies
        .iter()
        .map(|p| p.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / (norm(p) * norm(h)))
        .collect();
    let exps: Vec<f64> = p_t.iter().map(|s| (s / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    let l1: f64 = c.iter().map(|&v| v as f64).sum();
    -c.iter().zip(&exps).map(|(&ci, e)| ci as f64 / l1 * (e / z).ln()).sum::<f64>()
}

fn loss_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sdh: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(2..128);
        let (a, b) = (random_hash(&mut rng, n)?, random_hash(&mut rng, n)?);
        let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum();
        let na: f64 = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        worst_sdh = worst_sdh.max((sdh_loss(&a, &b)? - (1.0 - dot / (na * nb))).abs());
    }
    let (mut worst_bce, mut worst_hp): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let n_h = rng.random_range(4..96);
        let h = random_hash(&mut rng, n_h)?;
        let sigma_g = rng.random_range(0.3..1.0);
        worst_bce = worst_bce.max((bce_q_loss(&h, sigma_g)? - oracle_bce_q(h.as_slice(), sigma_g)).abs());
        let n_cls = rng.random_range(2..24);
        let proxies: Vec<Vec<f64>> = (0..n_cls).map(|_| (0..n_h).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut c: Vec<u8> = (0..n_cls).map(|_| rng.random_bool(0.3) as u8).collect();
        c[rng.random_range(0..n_cls)] = 1;
        let tau = rng.random_range(0.1..1.0);
        worst_hp = worst_hp.max((hash_proxy_loss(&c, &h, &proxies, tau)? - oracle_hash_proxy(&c, h.as_slice(), &proxies, tau)).abs());
    }
    Ok((
        worst_sdh <= 1e-6 && worst_bce <= 1e-6 && worst_hp <= 1e-6,
        format!("max abs error: sdh {worst_sdh:.2e}, bce-Q {worst_bce:.2e}, hash-proxy {worst_hp:.2e} (tol 1e-6)"),
    ))
}

fn tiny_dhd(dtype: DType, n_h: usize, seed: u64) -> anyhow::Result<DhdModule> {
    let cfg = DhdConfig {
        channels: 3,
        height: 8,
        width: 8,
        backbone_widths: vec![4, 8],
        n_e: 16,
        n_h,
        n_cls: SYNTHETIC_N_CLS,
        objective: DhdObjective::default(),
    };
    Ok(DhdModule::new(&cfg, dtype, &Device::Cpu, seed)?)
}

fn gradient_check() -> Check {
    let dhd = tiny_dhd(DType::F64, 16, 11)?.freeze();
    let ds = make_synthetic(2, 3, 8, 8, 4)?;
    let s = ds.image(0)?.to_tensor(DType::F64, &Device::Cpu)?;
    let other = ds.image(1)?.to_tensor(DType::F64, &Device::Cpu)?;
    let s_hat = ((&s * 0.4)? + (&other * 0.4)?)?.affine(1.0, 0.1)?;
    let base: Vec<f64> = s_hat.flatten_all()?.to_vec1()?;
    let v = Var::from_tensor(&s_hat)?;
    let lambda = 0.06;
    let loss = composite_loss_tensor(&s, v.as_tensor(), Some(&dhd), lambda, TrainMode::ProposedDhd)?;
    let grad: Vec<f64> = loss.total.backward()?.get(&v).expect("gradient for the reconstruction").flatten_all()?.to_vec1()?;
    let eval = |data: Vec<f64>| -> anyhow::Result<f64> {
        let t = Tensor::from_vec(data, s.dims(), &Device::Cpu)?;
        Ok(composite_loss_tensor(&s, &t, Some(&dhd), lambda, TrainMode::ProposedDhd)?.total.to_scalar::<f64>()?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let samples = 64;
    for _ in 0..samples {
        let i = rng.random_range(0..base.len());
        let (mut up, mut down) = (base.clone(), base.clone());
        up[i] += h;
        down[i] -= h;
        let fd = (eval(up)? - eval(down)?) / (2.0 * h);
        let scale = grad[i].abs().max(fd.abs());
        if scale > 1e-9 {
            worst = worst.max((grad[i] - fd).abs() / scale);
        }
    }
    Ok((worst <= 1e-3, format!("{samples} coordinates, max relative error {worst:.2e} (tol 1e-3)")))
}

fn tiny_spec(relays: usize, snr_db: f64, size: usize, c_out: usize, hidden: usize) -> ChainSpec {
    ChainSpec {
        jscc: JsccConfig {
            channels: 3,
            height: size,
            width: size,
            c_out,
            hidden,
            res_blocks: 1,
        },
        relays,
        shared_weights: false,
        snr_db,
    }
}

fn freeze_contract() -> Check {
    let dhd = tiny_dhd(DType::F32, 16, 2)?.freeze();
    let ds = make_synthetic(16, 3, 8, 8, 6)?;
    let probe = ds.image(0)?;
    let (dhd_before, hash_before) = (dhd.checksum()?, dhd.hash(&probe)?);
    let chain = DfChain::new(&tiny_spec(0, -5.0, 8, 4, 8), DType::F32, &Device::Cpu, 2)?;
    let jscc_before = chain.checksum()?;
    let cfg = TrainConfig {
        batch_size: 8,
        lr0: 1e-3,
        ..TrainConfig::full_scale(-5.0, 0, TrainMode::ProposedDhd, 9)
    };
    let mut trainer = DfTrainer::new(chain, Some(&dhd), &cfg)?;
    for step in 0..100 {
        let idx: Vec<usize> = (0..8).map(|j| (step * 8 + j) % ds.len()).collect();
        let (images, _) = gather(&ds, &idx)?;
        trainer.step(&images, step / 2, step % 2)?;
    }
    let (images, _) = gather(&ds, &[0, 1, 2, 3])?;
    let seeds = vec![(0..4).map(|i| seed::derive(1, Stream::Eval, &[i])).collect::<Vec<_>>()];
    let grads = hash_path_gradients(trainer.chain(), &dhd, &images, &seeds)?;
    let grad = grads.decoder_output;
    let dhd_same = dhd.checksum()? == dhd_before && dhd.hash(&probe)? == hash_before;
    let jscc_moved = trainer.chain().checksum()? != jscc_before;
    Ok((
        dhd_same && jscc_moved && grad > 0.0,
        format!("hash module unchanged: {dhd_same}, codec changed: {jscc_moved}, hash-path gradient norm {grad:.3e} at the decoder output, {:.3e} at the encoder input", grads.encoder_input),
    ))
}

fn quantizer_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rates = [(1u32, Ratio::from(2u32)), (2, Ratio::from(1)), (2, Ratio::new(3, 2)), (4, Ratio::new(3, 4)), (4, Ratio::new(5, 4)), (1, Ratio::from(5))];
    let (mut monotone, mut nearest_ok, mut checked) = (true, true, 0usize);
    for fit_i in 0..100u64 {
        let (n_q, b) = rates[rng.random_range(0..rates.len())];
        let rate = QuantRate::new(n_q, b)?;
        let len = 8;
        let samples: Vec<Vec<f32>> = (0..48).map(|_| (0..len).map(|_| rng.random_range(-2.0f32..2.0)).collect()).collect();
        let fit = fit_codebook(&samples, rate, fit_i)?;
        monotone &= fit.distortion_history.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
        let book = &fit.codebook;
        if book.n_centers() <= 32 {
            for s in &samples {
                let y: Vec<f64> = s.iter().map(|&v| v as f64).collect();
                let q = book.quantize(&y)?;
                for (blk, &idx) in y.chunks(n_q as usize).zip(&q.indices) {
                    let mut best = (0usize, f64::INFINITY);
                    for c in 0..book.n_centers() {
                        let d: f64 = blk.iter().zip(book.center(c)).map(|(a, &b)| (a - b as f64).powi(2)).sum();
                        if d < best.1 {
                            best = (c, d);
                        }
                    }
                    nearest_ok &= best.0 == idx as usize;
                    checked += 1;
                }
            }
        }
    }

    let ds = make_synthetic(4, 3, 8, 8, 5)?;
    let chain = DfChain::new(&tiny_spec(0, -5.0, 8, 4, 8), DType::F32, &Device::Cpu, 2)?;
    let outputs = collect_channel_outputs(chain.hop(0), &ds, -5.0, 17, 1)?;
    let book = fit_codebook(&outputs, QuantRate::new(1, Ratio::from(6))?, 0)?
        .codebook
        .with_provenance(chain.hop(0).k() as u64, -5.0);
    let qf = QfPipeline::new(chain.hop(0).clone(), book, -5.0)?;
    let mut lossless = true;
    for i in 0..ds.len() {
        let s = seed::derive(17, Stream::Noise, &[i as u64]);
        let img = ds.image(i)?;
        lossless &= qf.qf_forward(&img, s)? == chain.df_forward(&img, &[s])?.output;
    }
    Ok((
        monotone && nearest_ok && lossless,
        format!("distortion non-increasing on 100 fits: {monotone}, brute-force nearest on {checked} blocks: {nearest_ok}, lossless QF == DF r=0: {lossless}"),
    ))
}

struct SeedRun {
    train_loss_down: bool,
    df_mse: [f64; 3],
    qf_mse: [f64; 5],
    hash_cos_proposed: f64,
    hash_cos_baseline: f64,
}

const DESK_SNR: f64 = -5.0;

fn desk_run(seed_value: u64) -> anyhow::Result<SeedRun> {
    let dev = Device::Cpu;
    let train = make_synthetic(64, 3, 32, 32, seed_value)?;
    let val = make_synthetic(16, 3, 32, 32, seed_value + 100)?;
    let test = make_synthetic(64, 3, 32, 32, seed_value + 200)?;
    let dhd_cfg = DhdConfig {
        channels: 3,
        height: 32,
        width: 32,
        backbone_widths: vec![8, 16, 32],
        n_e: 64,
        n_h: 32,
        n_cls: SYNTHETIC_N_CLS,
        objective: DhdObjective::default(),
    };
    let dhd_train = DhdTrainConfig {
        epochs: 8,
        batch_size: 16,
        lr: 1e-3,
        seed: seed_value,
        pretrained_backbone: None,
        transforms: TransformPair::default(),
    };
    let dhd = train_dhd(&train, &val, &dhd_cfg, &dhd_train, DType::F32, &dev)?.module.freeze();
    let tmp = tempfile::tempdir()?;
    let cfg = |r: usize, mode| TrainConfig {
        batch_size: 16,
        lr0: 1e-3,
        epochs: 10,
        patience: None,
        ..TrainConfig::full_scale(DESK_SNR, r, mode, seed_value)
    };
    let mut train_loss_down = true;
    let mut run = |r: usize, mode: TrainMode| -> anyhow::Result<DfChain> {
        let chain = DfChain::new(&tiny_spec(r, DESK_SNR, 32, 8, 16), DType::F32, &dev, seed_value)?;
        let dir = tmp.path().join(format!("{mode}_r{r}"));
        let report = train_df_system(chain, Some(&dhd), &train, &val, &cfg(r, mode), &dir, false)?;
        let h = &report.history;
        train_loss_down &= h.last().expect("epochs ran").train_loss < h[0].train_loss;
        Ok(report.chain)
    };
    let chains = [run(0, TrainMode::ProposedDhd)?, run(1, TrainMode::ProposedDhd)?, run(2, TrainMode::ProposedDhd)?];
    let baseline = run(0, TrainMode::BaselineMse)?;

    let mut df_mse = [0.0; 3];
    for (r, chain) in chains.iter().enumerate() {
        df_mse[r] = DfTrainer::new(chain.clone(), Some(&dhd), &cfg(r, TrainMode::ProposedDhd))?.evaluate(&test)?.mse;
    }
    let hash_cos_proposed = DfTrainer::new(chains[0].clone(), Some(&dhd), &cfg(0, TrainMode::ProposedDhd))?
        .evaluate(&test)?
        .hash_cos
        .expect("hash module present");
    let hash_cos_baseline = DfTrainer::new(baseline, Some(&dhd), &cfg(0, TrainMode::BaselineMse))?
        .evaluate(&test)?
        .hash_cos
        .expect("hash module present");

    let codec = chains[0].hop(0);
    let outputs = collect_channel_outputs(codec, &val, DESK_SNR, seed_value, 16)?;
    let mut qf_mse = [0.0; 5];
    for (j, rate) in QuantRate::sweep().iter().enumerate() {
        let book = fit_codebook(&outputs, *rate, seed_value)?.codebook.with_provenance(codec.k() as u64, DESK_SNR);
        let qf = QfPipeline::new(codec.clone(), book, DESK_SNR)?;
        qf_mse[j] = qf_test_mse(&qf, &test, seed_value)?;
    }
    Ok(SeedRun {
        train_loss_down,
        df_mse,
        qf_mse,
        hash_cos_proposed,
        hash_cos_baseline,
    })
}

fn qf_test_mse(qf: &QfPipeline, test: &InMemoryDataset, seed_value: u64) -> anyhow::Result<f64> {
    let idx: Vec<usize> = (0..test.len()).collect();
    let (images, _) = gather(test, &idx)?;
    let seeds: Vec<u64> = idx.iter().map(|&i| seed::derive(seed_value, Stream::Eval, &[0, i as u64])).collect();
    let recon = qf.qf_forward_batch(&images, &seeds)?;
    let total: f64 = images.iter().zip(&recon).map(|(a, b)| a.mse(b)).sum::<Result<f64, _>>()?;
    Ok(total / images.len() as f64)
}

fn desk_trends() -> Check {
    let runs = [1u64, 2, 3].iter().map(|&s| desk_run(s)).collect::<anyhow::Result<Vec<_>>>()?;
    let loss_down = runs.iter().all(|r| r.train_loss_down);
    let df_inv: usize = runs.iter().map(|r| r.df_mse.windows(2).filter(|w| w[1] < w[0]).count()).sum();
    let qf_inv: usize = runs.iter().map(|r| r.qf_mse.windows(2).filter(|w| w[1] > w[0]).count()).sum();
    let hash_up = runs.iter().all(|r| r.hash_cos_proposed > r.hash_cos_baseline);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/");
    let mut detail = format!(
        "(a) train loss falls: {loss_down}; (b) DF r-order inversions {df_inv} (max 1); (c) QF bpp-order inversions {qf_inv} (max 1); (d) proposed > baseline hash cos: {hash_up}"
    );
    for (s, r) in runs.iter().enumerate() {
        detail.push_str(&format!(
            "\n        seed {}: DF mse r0..2 {}, QF mse by ascending rate {}, hash cos proposed {:.4} vs baseline {:.4}",
            s + 1,
            fmt(&r.df_mse),
            fmt(&r.qf_mse),
            r.hash_cos_proposed,
            r.hash_cos_baseline
        ));
    }
    Ok((loss_down && df_inv <= 1 && qf_inv <= 1 && hash_up, detail))
}

fn psnr_oracle() -> Check {
    let ones = ImageTensor::filled(3, 4, 4, 1.0)?;
    let zeros = ImageTensor::filled(3, 4, 4, 0.0)?;
    let half = ImageTensor::filled(3, 4, 4, 0.5)?;
    let unit = psnr(&ones, &zeros)?;
    let quarter = psnr(&ones, &half)?;
    let same = psnr(&half, &half)?;
    let expected = -10.0 * 0.25f64.log10();
    let pass = unit.abs() <= 1e-9 && (quarter - expected).abs() <= 1e-9 && same == f64::INFINITY;
    Ok((pass, format!("unit MSE {unit} dB, uniform 0.5 error {quarter:.10} dB (oracle {expected:.10}), identical {same}")))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("rate arithmetic is exact over the five quantizer pairs", rate_arithmetic),
        ("AWGN matches the target SNR and per-component variance", channel_statistics),
        ("hash losses match independent oracles", loss_oracles),
        ("composite-loss gradient matches central differences", gradient_check),
        ("frozen hash module stays fixed while gradients reach the codec", freeze_contract),
        ("quantizer distortion, nearest-center and lossless-limit properties", quantizer_properties),
        ("desk-scale end-to-end trends", desk_trends),
        ("PSNR matches hand-computed values", psnr_oracle),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!pass);
        println!(
            "{} [{}] {name} ({:.1}s): {detail}",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("SKIP [9] full-scale DF sweep reproduction: manual procedure, see README");
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
