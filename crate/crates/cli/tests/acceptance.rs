//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scaa_core::gradcheck::{op_suite, random_tensor, CheckConfig};
use scaa_core::io::parse_attention;
use scaa_core::loss::{soft_dice_phi, LossConfig};
use scaa_core::memest::{self, reference_table};
use scaa_core::metrics::{dsc, hd95};
use scaa_core::model::{attend, count_parameters, SliceContext};
use scaa_core::{Graph, ScaaConfig, ScaaModel, Tensor, Variant};

type Verdict = Result<String, String>;

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn scaa(args: &[&str], cwd: &Path) -> (Output, Duration) {
    let t = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_scaa"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SCAA_THREADS")
        .output()
        .expect("spawn scaa");
    (out, t.elapsed())
}

fn scaa_ok(args: &[&str], cwd: &Path) -> Result<(String, Duration), String> {
    let (out, dt) = scaa(args, cwd);
    if !out.status.success() {
        return Err(format!(
            "`scaa {}` exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok((String::from_utf8_lossy(&out.stdout).into_owned(), dt))
}

/// Data rows of an echo-prefixed CSV as header-keyed maps.
fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<String> = lines
        .next()
        .expect("header")
        .split(',')
        .map(str::to_string)
        .collect();
    lines
        .map(|l| {
            header
                .iter()
                .cloned()
                .zip(l.split(',').map(str::to_string))
                .collect()
        })
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

// ---------------------------------------------------------------- 1 and 2

fn memory_table(dir: &Path) -> Verdict {
    let rows = reference_table().map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for r in &rows {
        worst = worst.max(r.mem_dev().abs());
        if r.mem_dev().abs() > 0.10 {
            return Err(format!(
                "{} {:.3} GiB vs {:.2} ({:+.1}%)",
                r.name,
                r.gib,
                r.target_gib,
                r.mem_dev() * 100.0
            ));
        }
    }
    let (_, dt) = scaa_ok(&["memest"], dir)?;
    if dt >= Duration::from_secs(1) {
        return Err(format!("memest took {dt:?}"));
    }
    let (line, _) = scaa_ok(&["memest", "--arch", "unet2d", "--batch", "4"], dir)?;
    let gib: f64 = line
        .split_whitespace()
        .zip(line.split_whitespace().skip(1))
        .find(|(_, unit)| *unit == "GiB")
        .and_then(|(v, _)| v.parse().ok())
        .ok_or(format!("no GiB figure in {line:?}"))?;
    if (gib / 2.86 - 1.0).abs() > 0.10 {
        return Err(format!("unet2d batch 4 reported {gib} GiB"));
    }
    Ok(format!(
        "5 rows, worst deviation {:.1}%, table in {} ms",
        worst * 100.0,
        dt.as_millis()
    ))
}

fn parameter_counts(dir: &Path) -> Verdict {
    let rows = reference_table().map_err(|e| e.to_string())?;
    let dev = |name: &str| {
        rows.iter()
            .find(|r| r.name == name)
            .and_then(|r| r.param_dev())
            .unwrap()
    };
    let (u, s) = (dev("unet2d"), dev("scaa"));
    if u.abs() > 0.15 || s.abs() > 0.20 {
        return Err(format!(
            "unet2d {:+.1}%, scaa {:+.1}%",
            u * 100.0,
            s * 100.0
        ));
    }
    let estimated = rows
        .iter()
        .find(|r| r.name == "scaa")
        .unwrap()
        .params
        .unwrap();
    let live = count_parameters(&memest::full_scaa());
    let (_, store) = ScaaModel::init::<f32>(memest::full_scaa(), 0).map_err(|e| e.to_string())?;
    let stored: usize = store.names().map(|n| store.tensor(n).unwrap().len()).sum();
    if estimated != live || live != stored {
        return Err(format!(
            "estimator {estimated}, count_parameters {live}, live store {stored}"
        ));
    }
    let (table, _) = scaa_ok(&["memest"], dir)?;
    if !table.lines().any(|l| l.starts_with("note:")) {
        return Err("report has no deviation note".into());
    }
    Ok(format!(
        "unet2d {:+.1}%, scaa {:+.1}%, scaa count {live} agrees",
        u * 100.0,
        s * 100.0
    ))
}

// ---------------------------------------------------------------- 3

fn gradient_integrity(dir: &Path) -> Verdict {
    let t = Instant::now();
    let ops = op_suite(&CheckConfig::default()).map_err(|e| e.to_string())?;
    let (name, worst) = ops
        .iter()
        .map(|(n, r)| (n.as_str(), r.max_rel_err()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    if worst >= 1e-5 {
        return Err(format!("{name} max rel err {worst:.2e}"));
    }
    let (out, _) = scaa_ok(&["gradcheck", "--model", "micro"], dir)?;
    let dt = t.elapsed();
    if dt >= Duration::from_secs(300) {
        return Err(format!("took {dt:?}"));
    }
    let summary = out.lines().last().unwrap_or_default().to_string();
    Ok(format!(
        "{} primitive cases, worst {worst:.1e}; model: {summary}; {:.0} s",
        ops.len(),
        dt.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 4

fn random_config(rng: &mut ChaCha8Rng, variant: Variant) -> ScaaConfig {
    let mut c = ScaaConfig::micro(rng.random_range(1..=3)).with_variant(variant);
    let c3 = rng.random_range(1..=3);
    c.c3d = [rng.random_range(1..=3), rng.random_range(1..=3), c3, c3];
    for s in 0..4 {
        c.heads[s] = rng.random_range(1..=3);
        c.embed[s] = rng.random_range(1..=2);
        c.pool[s] = [1, 2, 4][rng.random_range(0..3)];
    }
    c
}

fn permute_depth(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let s = t.shape();
    let plane = s[2] * s[3];
    let mut out = Vec::with_capacity(t.len());
    for c in 0..s[0] {
        for &d in perm {
            let at = (c * s[1] + d) * plane;
            out.extend_from_slice(&t.data()[at..at + plane]);
        }
    }
    Tensor::new(s.to_vec(), out).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn attention_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut calls, mut vectors) = (0usize, 0usize);
    let (mut sum_err, mut shift_err, mut perm_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for trial in 0..8 {
        let variant = if trial % 2 == 0 {
            Variant::Scaa
        } else {
            Variant::ScaaStar
        };
        let config = random_config(&mut rng, variant);
        let (model, store) = ScaaModel::init::<f64>(config, trial).map_err(|e| e.to_string())?;
        let mut g = Graph::<f64>::new();
        let bound = store.bind_with(&mut g, false);
        let vol = g.constant(random_tensor(&[1, 32, 32, 32], 100 + trial));
        let ctx = model
            .encode_3d(&mut g, &bound, vol)
            .map_err(|e| e.to_string())?
            .slice;
        for _ in 0..2 {
            let z = rng.random_range(0..32);
            let slice = g.constant(random_tensor(&[1, 32, 32], rng.random()));
            let feats = model
                .encode_2d(&mut g, &bound, slice)
                .map_err(|e| e.to_string())?;
            for s in 0..4 {
                let (fused, records) = model
                    .msfa(&mut g, &bound, s, feats[s + 1], &ctx, z)
                    .map_err(|e| e.to_string())?;
                calls += 1;
                let fused = g.value(fused).clone();
                let weights: Vec<Vec<f64>> = records
                    .iter()
                    .map(|&(_, a)| g.value(a).data().to_vec())
                    .collect();
                for w in &weights {
                    vectors += 1;
                    sum_err = sum_err.max((w.iter().sum::<f64>() - 1.0).abs());
                    let logits: Vec<f64> = w.iter().map(|v| v.ln()).collect();
                    let shift = rng.random_range(-50.0..50.0);
                    let a = g.constant(Tensor::new(vec![w.len()], logits.clone()).unwrap());
                    let b = g.constant(
                        Tensor::new(vec![w.len()], logits.iter().map(|l| l + shift).collect())
                            .unwrap(),
                    );
                    let (sa, sb) = (g.softmax(a, 0).unwrap(), g.softmax(b, 0).unwrap());
                    shift_err = shift_err.max(max_abs_diff(g.value(sa).data(), g.value(sb).data()));
                    shift_err = shift_err.max(max_abs_diff(g.value(sa).data(), w));
                }

                let depth = g.shape(ctx.f3d[s])[1];
                let mut perm: Vec<usize> = (0..depth).collect();
                for i in (1..depth).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let mut pg = Graph::<f64>::new();
                let pb = store.bind_with(&mut pg, false);
                let mut leaf = |v, permute: bool| {
                    let t = g.value(v);
                    pg.constant(if permute {
                        permute_depth(t, &perm)
                    } else {
                        t.clone()
                    })
                };
                let pctx = SliceContext {
                    f3d: std::array::from_fn(|i| leaf(ctx.f3d[i], i == s)),
                    keys: std::array::from_fn(|i| ctx.keys[i].map(|k| leaf(k, i == s))),
                    globe: ctx.globe.map(|v| leaf(v, false)),
                };
                let f2d = leaf(feats[s + 1], false);
                let (pf, precords) = model
                    .msfa(&mut pg, &pb, s, f2d, &pctx, z)
                    .map_err(|e| e.to_string())?;
                calls += 1;
                perm_err = perm_err.max(max_abs_diff(pg.value(pf).data(), fused.data()));
                for (w, &(_, pa)) in weights.iter().zip(&precords) {
                    let pw = pg.value(pa).data();
                    let back: Vec<f64> = perm.iter().map(|&d| w[d]).collect();
                    perm_err = perm_err.max(max_abs_diff(pw, &back));
                }
            }
        }
    }
    let summary = format!(
        "{calls} msfa calls, {vectors} vectors: sum err {sum_err:.1e}, shift err {shift_err:.1e}, permutation err {perm_err:.1e}"
    );
    if calls < 100 || sum_err > 1e-6 || shift_err > 1e-6 || perm_err > 1e-6 {
        return Err(summary);
    }
    Ok(summary)
}

// ---------------------------------------------------------------- 5

fn loss_metric_oracles() -> Verdict {
    let cfg = |alpha, beta, eps| LossConfig { alpha, beta, eps };
    #[rustfmt::skip]
    let cases: Vec<(Vec<f64>, Vec<f64>, LossConfig, f64)> = vec![
        (vec![1., 1., 0., 0.], vec![1., 0., 1., 0.], cfg(0.5, 0.5, 0.0), 0.5),
        (vec![1., 1., 1.], vec![1., 1., 1.], cfg(0.5, 0.5, 1e-5), 3.0 / 3.00001),
        (vec![0.5, 0.5], vec![1., 0.], cfg(0.5, 0.5, 0.0), 0.5),
        (vec![1., 1., 1., 0.], vec![1., 0., 0., 0.], cfg(0.0, 1.0, 0.0), 1.0),
        (vec![1., 1., 1., 0.], vec![1., 0., 0., 0.], cfg(1.0, 0.0, 0.0), 1.0 / 3.0),
        (vec![0., 0.], vec![1., 1.], cfg(0.5, 0.5, 1e-5), 0.0),
        (vec![0.2, 0.8, 0.6], vec![0., 1., 1.], cfg(0.3, 0.7, 0.0), 1.4 / 1.88),
        (vec![0.25; 4], vec![1., 1., 0., 0.], cfg(0.5, 0.5, 1e-5), 0.5 / 1.50001),
        (vec![0.9, 0.1], vec![1., 0.], cfg(1.0, 1.0, 0.0), 0.9 / 1.1),
        (vec![0., 0.], vec![0., 0.], cfg(0.5, 0.5, 1e-5), 0.0),
        (vec![1., 0.5, 0.25, 0.125], vec![1., 1., 1., 1.], cfg(0.5, 0.5, 0.0), 1.875 / 2.9375),
        (vec![0.5, 0.5, 0.5], vec![0., 1., 0.], cfg(2.0, 0.0, 1.0), 0.5 / 3.5),
    ];
    let mut worst: f64 = 0.0;
    for (i, (m, g, c, want)) in cases.iter().enumerate() {
        let got = soft_dice_phi(m, g, c).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        if (got - want).abs() > 1e-7 {
            return Err(format!("phi case {i}: {got} vs {want}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = [16, 16, 16];
    let mut pairs = 0;
    while pairs < 60 {
        let (a, b) = (random_mask(&mut rng, shape), random_mask(&mut rng, shape));
        let got = hd95(&a, &b, shape, [1.0; 3]).map_err(|e| e.to_string())?;
        let want = brute_hd95(&a, &b, shape);
        if got != want {
            return Err(format!(
                "hd95 pair {pairs}: {got:?} vs brute force {want:?}"
            ));
        }
        pairs += 1;
    }

    let a = random_mask(&mut rng, shape);
    let not_a: Vec<bool> = a.iter().map(|v| !v).collect();
    let empty = vec![false; a.len()];
    let identity = dsc(&a, &a).map_err(|e| e.to_string())?;
    let disjoint = dsc(&a, &not_a).map_err(|e| e.to_string())?;
    let both_empty = dsc(&empty, &empty).map_err(|e| e.to_string())?;
    if identity != 100.0 || disjoint != 0.0 || both_empty != 100.0 {
        return Err(format!(
            "dsc identity {identity}, disjoint {disjoint}, empty {both_empty}"
        ));
    }
    Ok(format!(
        "{} phi cases (worst {worst:.1e}), {pairs} hd95 pairs exact, dsc cases exact",
        cases.len()
    ))
}

/// Boxes, balls, or sparse noise.
fn random_mask(rng: &mut ChaCha8Rng, [d, h, w]: [usize; 3]) -> Vec<bool> {
    let kind = rng.random_range(0..3);
    let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(2.0..14.0));
    let r: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.0..6.0));
    let density = rng.random_range(0.02..0.3);
    let mut m = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let p = [z as f64, y as f64, x as f64];
                m.push(match kind {
                    0 => (0..3).all(|i| (p[i] - c[i]).abs() <= r[i]),
                    1 => (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum::<f64>() <= 1.0,
                    _ => rng.random_bool(density),
                });
            }
        }
    }
    m
}

fn brute_hd95(a: &[bool], b: &[bool], [d, h, w]: [usize; 3]) -> Option<f64> {
    let surface = |m: &[bool]| -> Vec<[i64; 3]> {
        let inside = |z: i64, y: i64, x: i64| {
            z >= 0
                && y >= 0
                && x >= 0
                && z < d as i64
                && y < h as i64
                && x < w as i64
                && m[((z as usize) * h + y as usize) * w + x as usize]
        };
        let mut pts = Vec::new();
        for z in 0..d as i64 {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let n = [
                        (1, 0, 0),
                        (-1, 0, 0),
                        (0, 1, 0),
                        (0, -1, 0),
                        (0, 0, 1),
                        (0, 0, -1),
                    ];
                    if inside(z, y, x)
                        && n.iter()
                            .any(|&(dz, dy, dx)| !inside(z + dz, y + dy, x + dx))
                    {
                        pts.push([z, y, x]);
                    }
                }
            }
        }
        pts
    };
    let (sa, sb) = (surface(a), surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let nearest = |from: &[[i64; 3]], to: &[[i64; 3]]| -> Vec<f64> {
        from.iter()
            .map(|p| {
                let best = to
                    .iter()
                    .map(|q| (0..3).map(|i| (p[i] - q[i]).pow(2)).sum::<i64>())
                    .min()
                    .unwrap();
                (best as f64).sqrt()
            })
            .collect()
    };
    let mut all = nearest(&sa, &sb);
    all.extend(nearest(&sb, &sa));
    all.sort_by(f64::total_cmp);
    let pos = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(all[lo] + (all[hi] - all[lo]) * (pos - lo as f64))
}

// ---------------------------------------------------------------- 6

/// Direct loop evaluation of per-head scaled dot-product weights and the
/// weighted depth sum.
fn loop_attend(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    ctx: &Tensor<f64>,
    heads: usize,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (qs, ks, cs) = (q.shape(), k.shape(), ctx.shape());
    let (e, depth, h, w) = (qs[0] / heads, ks[1], qs[1], qs[2]);
    let qv = |c: usize, y: usize, x: usize| q.data()[(c * h + y) * w + x];
    let kv = |c: usize, d: usize, y: usize, x: usize| k.data()[((c * depth + d) * h + y) * w + x];
    let plane = cs[2] * cs[3];
    let mut weights = Vec::new();
    let mut aggs = Vec::new();
    for head in 0..heads {
        let mut logits = vec![0.0; depth];
        for (d, l) in logits.iter_mut().enumerate() {
            for c in head * e..(head + 1) * e {
                for y in 0..h {
                    for x in 0..w {
                        *l += qv(c, y, x) * kv(c, d, y, x);
                    }
                }
            }
            *l /= ((e * h * w) as f64).sqrt();
        }
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        let a: Vec<f64> = exps.iter().map(|v| v / z).collect();
        let mut agg = vec![0.0; cs[0] * plane];
        for c in 0..cs[0] {
            for (d, &ad) in a.iter().enumerate() {
                for i in 0..plane {
                    agg[c * plane + i] += ad * ctx.data()[(c * depth + d) * plane + i];
                }
            }
        }
        weights.push(a);
        aggs.push(agg);
    }
    (weights, aggs)
}

fn msfa_equivalence() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let (mut saw_d1, mut saw_h1) = (false, false);
    let n = 30;
    for i in 0..n {
        let heads = if i % 5 == 0 {
            1
        } else {
            rng.random_range(1..=3)
        };
        let depth = if i % 4 == 0 {
            1
        } else {
            rng.random_range(1..=6)
        };
        saw_d1 |= depth == 1;
        saw_h1 |= heads == 1;
        let e = rng.random_range(1..=3);
        let (h, w) = (rng.random_range(1..=3), rng.random_range(1..=3));
        let c = rng.random_range(1..=3);
        let (ch, cw) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let seed = 1000 * i as u64;
        let q = random_tensor(&[heads * e, h, w], seed).map(|v| 3.0 * v);
        let k = random_tensor(&[heads * e, depth, h, w], seed + 1).map(|v| 3.0 * v);
        let ctx = random_tensor(&[c, depth, ch, cw], seed + 2);
        let mut g = Graph::<f64>::new();
        let (qv, kv, cv) = (
            g.constant(q.clone()),
            g.constant(k.clone()),
            g.constant(ctx.clone()),
        );
        let (wv, av) = attend(&mut g, qv, kv, cv, heads).map_err(|e| e.to_string())?;
        let (wo, ao) = loop_attend(&q, &k, &ctx, heads);
        for hd in 0..heads {
            worst = worst.max(max_abs_diff(g.value(wv[hd]).data(), &wo[hd]));
            worst = worst.max(max_abs_diff(g.value(av[hd]).data(), &ao[hd]));
        }
    }
    let summary =
        format!("{n} configurations (D=1 {saw_d1}, single head {saw_h1}), max abs err {worst:.1e}");
    if worst > 1e-6 || !saw_d1 || !saw_h1 {
        return Err(summary);
    }
    Ok(summary)
}

// ---------------------------------------------------------------- 7 and 9

struct Toy {
    train: PathBuf,
    held: PathBuf,
    run: PathBuf,
}

const TOY_STEPS: &str = "200";

impl Toy {
    fn at(root: &Path) -> Self {
        Toy {
            train: root.join("train"),
            held: root.join("held"),
            run: root.join("run"),
        }
    }
}

fn toy_training(root: &Path) -> Verdict {
    let toy = Toy::at(root);
    std::fs::create_dir_all(root).map_err(|e| e.to_string())?;
    scaa_ok(
        &[
            "gen",
            "--out",
            p(&toy.train),
            "--seed",
            "100",
            "--count",
            "8",
        ],
        root,
    )?;
    scaa_ok(
        &[
            "gen",
            "--out",
            p(&toy.held),
            "--seed",
            "900",
            "--count",
            "2",
        ],
        root,
    )?;
    let (_, dt) = scaa_ok(
        &[
            "train",
            "--data",
            p(&toy.train),
            "--out",
            p(&toy.run),
            "--model",
            "desk",
            "--variant",
            "scaa-star",
            "--lr",
            "2e-3",
            "--steps",
            TOY_STEPS,
            "--seed",
            "1",
        ],
        root,
    )?;
    let pred = root.join("pred");
    let ckpt = toy.run.join("model.ckpt");
    scaa_ok(
        &[
            "infer",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&toy.held),
            "--out",
            p(&pred),
        ],
        root,
    )?;
    let means: Vec<f64> = read_csv(&pred.join("metrics.csv"))
        .iter()
        .filter(|r| r["class"] == "mean")
        .map(|r| r["dsc_percent"].parse().unwrap())
        .collect();
    let dsc = means.iter().sum::<f64>() / means.len() as f64;

    let losses: Vec<f64> = read_csv(&toy.run.join("train_log.csv"))
        .iter()
        .map(|r| r["total"].parse().unwrap())
        .collect();
    let blocks: Vec<f64> = losses
        .chunks_exact(50)
        .map(|c| c.iter().sum::<f64>() / 50.0)
        .collect();
    let decreasing = blocks.len() >= 2 && blocks.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = blocks.iter().map(|b| format!("{b:.3}")).collect();
    let summary = format!(
        "{} steps in {:.0} s on {} core(s), held-out mean DSC {dsc:.1}%, 50-step mean loss [{}]",
        losses.len(),
        dt.as_secs_f64(),
        std::thread::available_parallelism().map_or(1, |n| n.get()),
        shown.join(" > ")
    );
    if dsc < 70.0 || !decreasing || losses.len() > 300 || dt >= Duration::from_secs(1800) {
        return Err(summary);
    }
    Ok(summary)
}

fn attention_locality(root: &Path, toy: &Toy) -> Verdict {
    let out = root.join("attn");
    scaa_ok(
        &[
            "attn-export",
            "--checkpoint",
            p(&toy.run.join("model.ckpt")),
            "--data",
            p(&toy.held),
            "--out",
            p(&out),
        ],
        root,
    )?;
    let text = std::fs::read_to_string(out.join("attention.csv")).map_err(|e| e.to_string())?;
    let records = parse_attention(&text).map_err(|e| e.to_string())?;
    let config = ScaaConfig::desk(3);
    let at2: Vec<_> = records.iter().filter(|r| r.scale == 2).collect();
    if at2.is_empty() {
        return Err("no scale-2 attention exported".into());
    }
    let depth = at2[0].weights.len();
    let factor = config.downsample * 2;
    let mut total = 0.0;
    for r in &at2 {
        let center = (r.slice_z / factor).min(depth - 1);
        let start = center.saturating_sub(1).min(depth.saturating_sub(3));
        total += r.weights[start..(start + 3).min(depth)].iter().sum::<f64>();
    }
    let mass = total / at2.len() as f64;
    let baseline = 3.0 / depth as f64;
    let summary = format!(
        "{} scale-2 vectors over D={depth}: mass near centre {mass:.3} vs uniform {baseline:.3}",
        at2.len()
    );
    if mass <= baseline {
        return Err(summary);
    }
    Ok(summary)
}

// ---------------------------------------------------------------- 8

fn ablation(root: &Path, toy: &Toy) -> Verdict {
    let out = root.join("ablate");
    scaa_ok(
        &[
            "ablate",
            "--data",
            p(&toy.train),
            "--eval",
            p(&toy.held),
            "--out",
            p(&out),
            "--model",
            "desk",
            "--steps",
            "20",
            "--slices",
            "8",
            "--lr",
            "2e-3",
        ],
        root,
    )?;
    let rows = read_csv(&out.join("ablation.csv"));
    let row = |v: &str| {
        rows.iter()
            .find(|r| r["variant"] == v)
            .ok_or(format!("no {v} row"))
    };
    for v in ["ca", "cca", "scaa", "scaa-star"] {
        if row(v)?["steps"] != "20" {
            return Err(format!("{v} did not finish its steps"));
        }
    }
    let cca_one_hot = row("cca")?["one_hot"] == "1";
    let scaa_pos: f64 = row("scaa")?["entropy_positive_slices"].parse().unwrap();
    let star_pos: f64 = row("scaa-star")?["entropy_positive_slices"]
        .parse()
        .unwrap();
    let summary = format!(
        "4 variants done; C-CA one-hot {cca_one_hot}; entropy > 0 on {:.0}% (SCAA) and {:.0}% (SCAA*) of slices",
        scaa_pos * 100.0,
        star_pos * 100.0
    );
    if !cca_one_hot || scaa_pos < 0.9 {
        return Err(summary);
    }
    Ok(summary)
}

// ---------------------------------------------------------------- 10

fn snapshot(dir: &Path, into: &mut BTreeMap<PathBuf, Vec<u8>>, root: &Path) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            snapshot(&path, into, root);
        } else {
            into.insert(
                path.strip_prefix(root).unwrap().to_path_buf(),
                std::fs::read(&path).unwrap(),
            );
        }
    }
}

fn determinism(root: &Path) -> Verdict {
    let d = |s: &str| root.join(s).to_str().unwrap().to_string();
    let data = d("data");
    let ckpt = d("train/model.ckpt");
    let micro_train = [
        "--model", "micro", "--steps", "3", "--slices", "2", "--seed", "7",
    ];
    let mut cmds: Vec<(&str, Vec<String>)> = vec![
        (
            "gen",
            vec![
                "gen", "--micro", "--count", "2", "--seed", "3", "--out", &data,
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "train",
            [
                &[
                    "train",
                    "--data",
                    &data,
                    "--out",
                    &d("train"),
                    "--checkpoint-every",
                    "2",
                ][..],
                &micro_train[..],
            ]
            .concat()
            .into_iter()
            .map(String::from)
            .collect(),
        ),
        (
            "infer",
            [
                "infer",
                "--checkpoint",
                &ckpt,
                "--data",
                &data,
                "--out",
                &d("pred"),
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "eval",
            [
                "eval",
                "--data",
                &data,
                "--pred",
                &d("pred"),
                "--out",
                &d("eval"),
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "gradcheck",
            [
                "gradcheck",
                "--samples",
                "3",
                "--slices",
                "1",
                "--out",
                &d("grad"),
            ]
            .map(String::from)
            .to_vec(),
        ),
        (
            "memest",
            ["memest", "--out", &d("mem")].map(String::from).to_vec(),
        ),
        (
            "memest --arch",
            ["memest", "--arch", "unet3d", "--out", &d("mem1")]
                .map(String::from)
                .to_vec(),
        ),
        (
            "attn-export",
            [
                "attn-export",
                "--checkpoint",
                &ckpt,
                "--data",
                &data,
                "--out",
                &d("attn"),
            ]
            .map(String::from)
            .to_vec(),
        ),
    ];
    cmds.push((
        "ablate",
        [
            &["ablate", "--data", &data, "--out", &d("ablate")][..],
            &["--model", "micro", "--steps", "2", "--slices", "2"][..],
        ]
        .concat()
        .into_iter()
        .map(String::from)
        .collect(),
    ));
    let run_all = || -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
        let _ = std::fs::remove_dir_all(root);
        std::fs::create_dir_all(root).unwrap();
        for (_, args) in &cmds {
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            scaa_ok(&refs, root)?;
        }
        let mut files = BTreeMap::new();
        snapshot(root, &mut files, root);
        Ok(files)
    };
    let first = run_all()?;
    let second = run_all()?;
    let differing: Vec<String> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let csvs = first
        .keys()
        .filter(|k| k.extension().is_some_and(|e| e == "csv"))
        .count();
    let ckpts = first
        .keys()
        .filter(|k| k.extension().is_some_and(|e| e == "ckpt"))
        .count();
    if !differing.is_empty() {
        return Err(format!("differing outputs: {}", differing.join(", ")));
    }
    Ok(format!(
        "{} subcommand runs x2, {} files identical ({csvs} csv, {ckpts} ckpt)",
        cmds.len(),
        first.len()
    ))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, v: Verdict| match &v {
        Ok(msg) => say(&format!("criterion {id:>2} PASS {name}: {msg}")),
        Err(msg) => {
            say(&format!("criterion {id:>2} FAIL {name}: {msg}"));
            failed.push(id);
        }
    };

    report(1, "memory table", guarded(|| memory_table(root)));
    report(2, "parameter counts", guarded(|| parameter_counts(root)));
    report(
        3,
        "gradient integrity",
        guarded(|| gradient_integrity(root)),
    );
    report(4, "attention invariants", guarded(attention_invariants));
    report(5, "loss and metric oracles", guarded(loss_metric_oracles));
    report(6, "attention vs loop oracle", guarded(msfa_equivalence));

    let toy_dir = root.join("toy");
    report(7, "toy training", guarded(|| toy_training(&toy_dir)));
    let toy = Toy::at(&toy_dir);
    report(8, "ablation harness", guarded(|| ablation(&toy_dir, &toy)));
    report(
        9,
        "attention locality",
        guarded(|| attention_locality(&toy_dir, &toy)),
    );
    report(
        10,
        "determinism",
        guarded(|| determinism(&root.join("det"))),
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
