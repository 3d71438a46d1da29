//! Acceptance suite. Runs every criterion in sequence and prints one
//! `PASS`/`FAIL` line per criterion. The process fails when a criterion fails,
//! except for the ones listed in `KNOWN_CONFLICTS`, whose analysis lives in
//! the project notes.

use std::collections::BTreeSet;
use std::time::Instant;

use graphwalk_core::constrained::{categorize, sobel3d, solve_constrained, Category, SampleCategories, BACK_THRESHOLD, FORE_THRESHOLD};
use graphwalk_core::hcrf::HcrfGraph;
use graphwalk_core::hyperopt::{tune, write_trial_log, Metrics, TunerConfig};
use graphwalk_core::mesh::curvature::curvature_tensors;
use graphwalk_core::mesh::susceptibility::SurfaceAnalysis;
use graphwalk_core::mesh::voxelize::Grid;
use graphwalk_core::mesh::{cylinder, icosphere};
use graphwalk_core::phantom::{generate_phantom, PhantomKind, PhantomSpec, SphereTubeGeometry};
use graphwalk_core::pipeline::{prepare, run_with_inputs, Inputs, RunConfig, Variant, WeightKind};
use graphwalk_core::pyramid::{build_pyramid, NeighborhoodTopology, OFFSETS_26};
use graphwalk_core::robust::{mad_sigma, tukey, tukey_deriv, EdgeWeights, TukeyParams, MAD_NORMALIZATION};
use graphwalk_core::samples::{aggregate, SampleSet};
use graphwalk_core::sir::{modified_weights_from_column, sir_iterate, SusceptibilityField};
use graphwalk_core::solver::{assemble, assemble_with_known, solve, SolverChoice, SolverOptions};
use graphwalk_core::Result;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail for documented reasons.
const KNOWN_CONFLICTS: &[u32] = &[4];

type Criterion = fn() -> Result<Outcome>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn tight(method: SolverChoice) -> SolverOptions {
    SolverOptions { method, tol: 1e-13, max_iter: Some(20_000), ..Default::default() }
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, extra: f64) -> Vec<(usize, usize, f64)> {
    let mut edges = Vec::new();
    let mut seen = BTreeSet::new();
    for v in 1..n {
        let u = rng.random_range(0..v);
        seen.insert((u, v));
        edges.push((u, v, rng.random_range(0.05..1.0)));
    }
    for a in 0..n {
        for b in a + 1..n {
            if !seen.contains(&(a, b)) && rng.random_bool(extra) {
                edges.push((a, b, rng.random_range(0.05..1.0)));
            }
        }
    }
    edges
}

fn dense_weights(n: usize, edges: &[(usize, usize, f64)]) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    for &(a, b, x) in edges {
        w[(a, b)] = x;
        w[(b, a)] = x;
    }
    w
}

fn random_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|v| v / s));
    }
    out
}

fn inf_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Dense solve of `(diag(rowsum W) + lambda I - W) p = lambda a` restricted to
/// the unknowns, with known values moved to the right-hand side.
fn dense_oracle(w: &DMatrix<f64>, a: &[f64], lambda: f64, known: &[Option<f64>]) -> Vec<f64> {
    let n = w.nrows();
    let unknown: Vec<usize> = (0..n).filter(|&j| known[j].is_none()).collect();
    let m = unknown.len();
    let mut g = DMatrix::zeros(m, m);
    let mut b = DVector::zeros(m);
    for (r, &j) in unknown.iter().enumerate() {
        let d: f64 = (0..n).map(|k| w[(j, k)]).sum();
        b[r] = lambda * a[j];
        for k in 0..n {
            match known[k] {
                Some(v) => b[r] += w[(j, k)] * v,
                None => {
                    let c = unknown.iter().position(|&u| u == k).unwrap();
                    g[(r, c)] -= w[(j, k)];
                }
            }
        }
        g[(r, r)] += d + lambda;
    }
    let x = g.lu().solve(&b).expect("dense oracle system is regular");
    let mut out: Vec<f64> = known.iter().map(|k| k.unwrap_or(f64::NAN)).collect();
    for (r, &j) in unknown.iter().enumerate() {
        out[j] = x[r];
    }
    out
}

/// `w'_jk = w_jk / sqrt(d_k) * s_k / s_j`, built densely.
fn dense_modified(w: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let n = w.nrows();
    let d: Vec<f64> = (0..n).map(|j| w.row(j).sum()).collect();
    DMatrix::from_fn(n, n, |j, k| w[(j, k)] / d[k].sqrt() * s[k] / s[j])
}

fn quadratic_energy(w: &DMatrix<f64>, a: &[f64], lambda: f64, p: &[f64], prior_term: &[bool]) -> f64 {
    let n = w.nrows();
    let mut e = 0.0;
    for j in 0..n {
        for k in 0..n {
            // ordered pairs, so each undirected edge counts once after halving
            e += 0.25 * w[(j, k)] * (p[j] - p[k]).powi(2);
        }
        if prior_term[j] {
            e += 0.5 * lambda * (p[j] - a[j]).powi(2);
        }
    }
    e
}

/// Smallest energy margin over 1000 alternatives: 500 uniform in the unit box
/// and 500 local perturbations of the solution. Fixed entries stay fixed.
fn worst_margin(
    rng: &mut ChaCha8Rng,
    energy: impl Fn(&[f64]) -> f64,
    sol: &[f64],
    free: &[bool],
) -> f64 {
    let e0 = energy(sol);
    let mut worst = f64::INFINITY;
    for t in 0..1000 {
        let alt: Vec<f64> = if t < 500 {
            sol.iter().zip(free).map(|(&v, &f)| if f { rng.random_range(0.0..1.0) } else { v }).collect()
        } else {
            let eps = 10f64.powf(rng.random_range(-4.0..-1.0));
            sol.iter()
                .zip(free)
                .map(|(&v, &f)| if f { (v + eps * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0) } else { v })
                .collect()
        };
        let margin = (energy(&alt) - e0) / e0.abs().max(1.0);
        worst = worst.min(margin);
    }
    worst
}

fn nested_inputs(dims: [usize; 3], noise: f64, seed: u64) -> Result<(RunConfig, Inputs)> {
    let cfg = RunConfig {
        phantom: Some(PhantomSpec { kind: PhantomKind::NestedShells, dims, noise, seed, ..Default::default() }),
        ..Default::default()
    };
    let inputs = Inputs::load(&cfg)?;
    Ok((cfg, inputs))
}

fn stationarity() -> Result<Outcome> {
    let start = Instant::now();
    let (base, inputs) = nested_inputs([6, 6, 6], 0.05, 3)?;
    let mut worst: f64 = 0.0;
    let mut layers = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for variant in [Variant::Fpg, Variant::Cfpg, Variant::Gfpg] {
        let cfg = RunConfig {
            variant: if variant == Variant::Gfpg { Variant::Fpg } else { variant },
            n_lay: 2,
            solver: tight(SolverChoice::Auto),
            ..base.clone()
        };
        let mut prepared = prepare(&cfg, &inputs)?;
        if variant == Variant::Gfpg {
            let fields = prepared
                .samples
                .iter()
                .map(|s| {
                    let scores = (0..s.len() * s.n_clas).map(|_| rng.random_range(0.1..1.0)).collect();
                    SusceptibilityField::from_scores(s.len(), s.n_clas, scores)
                })
                .collect::<Result<Vec<_>>>()?;
            prepared.susceptibility = Some(fields);
        }
        for r in 0..=cfg.n_lay {
            let sol = prepared.solve_layer(r, 0.4, &cfg.solver)?;
            worst = worst.max(sol.residual);
            layers += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-8 && secs < 10.0,
        format!("max residual {worst:.2e} over {layers} variant-resolution pairs in {secs:.2} s"),
    )
}

fn maximum_principle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_excess): (f64, f64) = (0.0, f64::NEG_INFINITY);
    for i in 0..100 {
        let dims = [rng.random_range(3..=8), rng.random_range(3..=8), rng.random_range(3..=8)];
        let kind = if rng.random_bool(0.5) { PhantomKind::Step } else { PhantomKind::NestedShells };
        let spec = PhantomSpec {
            kind,
            dims,
            noise: rng.random_range(0.0..0.3),
            seed: i,
            prior_confidence: rng.random_range(0.3..1.0),
            prior_blur: rng.random_range(0..=2),
            ..Default::default()
        };
        let cfg = RunConfig {
            n_lay: rng.random_range(0..=1),
            weights: if rng.random_bool(0.5) { WeightKind::Tukey } else { WeightKind::Plain },
            solver: tight(SolverChoice::Auto),
            phantom: Some(spec),
            ..Default::default()
        };
        let inputs = Inputs::load(&cfg)?;
        let prepared = prepare(&cfg, &inputs)?;
        let lambda = rng.random_range(1..=10) as f64 / 10.0;
        for r in 0..=cfg.n_lay {
            let p = prepared.solve_layer(r, lambda, &cfg.solver)?.posteriors;
            let s = &prepared.samples[r];
            for j in 0..p.n_samples() {
                worst_sum = worst_sum.max((p.row(j).iter().sum::<f64>() - 1.0).abs());
            }
            for c in 0..s.n_clas {
                let col = s.prior_column(c);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for v in p.column(c) {
                    worst_excess = worst_excess.max(lo - v).max(v - hi);
                }
            }
        }
    }
    outcome(
        worst_sum <= 1e-8 && worst_excess <= 1e-12,
        format!("max |row sum - 1| {worst_sum:.2e}; max excursion outside the prior range {worst_excess:.2e}"),
    )
}

fn oracle_equivalence() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut pcg_gap, mut sir_gap): (f64, f64) = (0.0, 0.0);
    for _ in 0..50 {
        let n = rng.random_range(2..=200);
        let k = rng.random_range(2..=4);
        let edges = random_graph(&mut rng, n, (4.0 / n as f64).min(0.5));
        let weights = EdgeWeights::from_edges(n, &edges)?;
        let w = dense_weights(n, &edges);
        let priors = random_rows(&mut rng, n, k);
        let lambda = rng.random_range(0.05..1.0);
        let seeds: Vec<Option<u16>> =
            (0..n).map(|_| rng.random_bool(0.1).then(|| rng.random_range(0..k) as u16)).collect();
        let seeded = rng.random_bool(0.5);
        let system = assemble(&weights, &priors, k, lambda, seeded.then_some(seeds.as_slice()))?;
        let (p, _) = solve(&system, &tight(SolverChoice::Iterative))?;
        for c in 0..k {
            let a: Vec<f64> = (0..n).map(|j| priors[j * k + c]).collect();
            let known: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    // seeded samples carry 1 - 1e-4 on the seed class, the rest spread evenly
                    let on = |l: u16| if l as usize == c { 1.0 - 1e-4 } else { 1e-4 / (k - 1) as f64 };
                    if seeded { seeds[j].map(on) } else { None }
                })
                .collect();
            pcg_gap = pcg_gap.max(inf_norm(&p.column(c), &dense_oracle(&w, &a, lambda, &known)));
        }

        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let mw = modified_weights_from_column(&weights, &s)?;
        let a: Vec<f64> = (0..n).map(|j| priors[j * k]).collect();
        let oracle = dense_oracle(&dense_modified(&w, &s), &a, lambda, &vec![None; n]);
        for method in [SolverChoice::Iterative, SolverChoice::Direct] {
            let sys = assemble_with_known(&mw, &a, 1, lambda, &vec![None; n])?;
            let (q, _) = solve(&sys, &tight(method))?;
            sir_gap = sir_gap.max(inf_norm(q.values(), &oracle));
        }
    }
    outcome(
        pcg_gap <= 1e-8 && sir_gap <= 1e-8,
        format!("PCG vs dense {pcg_gap:.2e}; guided BiCGSTAB and envelope LU vs dense LU {sir_gap:.2e}"),
    )
}

fn dirichlet_optimality() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let instances = 100;
    let mut failures = [0usize; 3];
    let mut worst = [f64::INFINITY; 3];
    for _ in 0..instances {
        let n = rng.random_range(2..=8);
        let edges = random_graph(&mut rng, n, 0.4);
        let weights = EdgeWeights::from_edges(n, &edges)?;
        let w = dense_weights(n, &edges);
        let lambda = rng.random_range(0.05..1.0);
        let priors = random_rows(&mut rng, n, 2);
        let a: Vec<f64> = (0..n).map(|j| priors[2 * j]).collect();
        let all = vec![true; n];

        let system = assemble(&weights, &priors, 2, lambda, None)?;
        let p = solve(&system, &tight(SolverChoice::Direct))?.0.column(0);
        let m = worst_margin(&mut rng, |q| quadratic_energy(&w, &a, lambda, q, &all), &p, &all);

        let category: Vec<Category> = (0..n)
            .map(|_| match rng.random_range(0..6) {
                0 => Category::Fore,
                1 => Category::Back,
                2 => Category::Hard,
                _ => Category::Rest,
            })
            .collect();
        let rest: Vec<bool> = category.iter().map(|&c| c == Category::Rest).collect();
        let cats = SampleCategories { class: 0, category, soft: Vec::new() };
        let pc = solve_constrained(&weights, &cats, &a, lambda, &tight(SolverChoice::Direct))?.values;
        let mc = worst_margin(&mut rng, |q| quadratic_energy(&w, &a, lambda, q, &rest), &pc, &rest);

        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let wm = dense_modified(&w, &s);
        let ps = dense_oracle(&wm, &a, lambda, &vec![None; n]);
        let ms = worst_margin(&mut rng, |q| quadratic_energy(&wm, &a, lambda, q, &all), &ps, &all);

        for (i, margin) in [m, mc, ms].into_iter().enumerate() {
            worst[i] = worst[i].min(margin);
            if margin < -1e-12 {
                failures[i] += 1;
            }
        }
    }
    outcome(
        failures.iter().all(|&f| f == 0),
        format!(
            "instances beaten by an alternative: fpg {}/{instances}, cfpg {}/{instances}, guided {}/{instances} \
             (worst relative margins {:.1e}, {:.1e}, {:.1e})",
            failures[0], failures[1], failures[2], worst[0], worst[1], worst[2]
        ),
    )
}

fn hcrf_exactness() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let forests = 150;
    for _ in 0..forests {
        let k = rng.random_range(2..=4);
        let max_n = match k {
            2 => 10,
            3 => 9,
            _ => 7,
        };
        let n = rng.random_range(1..=max_n);
        let parent: Vec<Option<usize>> =
            (0..n).map(|v| (v > 0 && rng.random_bool(0.8)).then(|| rng.random_range(0..v))).collect();
        let weight: Vec<f64> = parent.iter().map(|p| if p.is_some() { rng.random_range(0.0..1.0) } else { 0.0 }).collect();
        let post = random_rows(&mut rng, n, k);
        let lambda = rng.random_range(0.0..2.0);
        let graph = HcrfGraph::new(k, parent.clone(), weight.clone(), &post)?;
        let dp = graph.minimize(lambda)?;
        let energy = |l: &[u16]| -> f64 {
            (0..n)
                .map(|v| {
                    let unary = -post[v * k + l[v] as usize].max(1e-12).ln();
                    let pair = parent[v].map_or(0.0, |u| if l[u] != l[v] { lambda * weight[v] } else { 0.0 });
                    unary + pair
                })
                .sum()
        };
        let mut best = f64::INFINITY;
        let mut labels = vec![0u16; n];
        for code in 0..k.pow(n as u32) {
            let mut c = code;
            for l in labels.iter_mut() {
                *l = (c % k) as u16;
                c /= k;
            }
            best = best.min(energy(&labels));
        }
        worst = worst.max(energy(&dp) - best);
    }
    outcome(worst <= 1e-12, format!("{forests} forests, largest gap to exhaustive minimum {worst:.1e}"))
}

fn robust_identities() -> Result<Outcome> {
    let mut ok = true;
    let mut peak_err: f64 = 0.0;
    for sigma in [0.3, 1.0, 2.0, 5f64.sqrt(), 7.5] {
        let p = TukeyParams::with_sigma(sigma)?;
        let sat = sigma * sigma / 6.0;
        ok &= tukey(sigma, &p)? == sat && tukey(2.0 * sigma, &p)? == sat && tukey(50.0 * sigma, &p)? == sat;
        let step = 1e-4;
        let (mut arg, mut best) = (0.0, f64::NEG_INFINITY);
        let mut rho = 0.0;
        while rho <= sigma {
            let v = tukey_deriv(rho, &p);
            if v > best {
                best = v;
                arg = rho;
            }
            rho += step;
        }
        peak_err = peak_err.max((arg - sigma / 5f64.sqrt()).abs());
    }
    ok &= MAD_NORMALIZATION == 1.4826;

    // literal evaluation of the scale estimate on random lattices
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mad_gap: f64 = 0.0;
    for _ in 0..20 {
        let dims = [rng.random_range(2..=5), rng.random_range(2..=5), rng.random_range(1..=4)];
        let n: usize = dims.iter().product();
        let dim = rng.random_range(1..=3);
        let f: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let samples = SampleSet::new(0, 2, dim, f.clone(), dim, f.clone(), vec![0.5; 2 * n], None, None)?;
        let got = mad_sigma(&samples, &NeighborhoodTopology::lattice(dims), 1e-12)?.sigma_out;
        mad_gap = mad_gap.max((got - literal_sigma(&f, dims, dim)).abs());
    }
    outcome(
        ok && peak_err <= 1e-4 && mad_gap <= 1e-12,
        format!("saturation exact: {ok}; derivative peak off by {peak_err:.1e}; scale vs literal oracle {mad_gap:.1e}"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

fn literal_sigma(f: &[f64], dims: [usize; 3], dim: usize) -> f64 {
    let n: usize = dims.iter().product();
    let at = |x: i64, y: i64, z: i64| -> Option<usize> {
        let inside = x >= 0 && y >= 0 && z >= 0 && (x as usize) < dims[0] && (y as usize) < dims[1] && (z as usize) < dims[2];
        inside.then(|| x as usize + dims[0] * (y as usize + dims[1] * z as usize))
    };
    // F[j][slot] = difference vector, absent outside the lattice
    let mats: Vec<Vec<Option<Vec<f64>>>> = (0..n)
        .map(|j| {
            let (x, y, z) = ((j % dims[0]) as i64, ((j / dims[0]) % dims[1]) as i64, (j / (dims[0] * dims[1])) as i64);
            OFFSETS_26
                .iter()
                .map(|o| at(x + o[0], y + o[1], z + o[2]).map(|k| (0..dim).map(|d| f[j * dim + d] - f[k * dim + d]).collect()))
                .collect()
        })
        .collect();
    let med: Vec<Vec<f64>> = (0..26)
        .map(|s| {
            (0..dim)
                .map(|d| {
                    let v: Vec<f64> = mats.iter().filter_map(|m| m[s].as_ref().map(|c| c[d])).collect();
                    if v.is_empty() {
                        0.0
                    } else {
                        median(v)
                    }
                })
                .collect()
        })
        .collect();
    let dev: Vec<f64> = mats
        .iter()
        .filter(|m| m.iter().any(Option::is_some))
        .map(|m| {
            m.iter()
                .enumerate()
                .filter_map(|(s, c)| c.as_ref().map(|c| (0..dim).map(|d| (c[d] - med[s][d]).abs()).sum::<f64>()))
                .sum()
        })
        .collect();
    5f64.sqrt() * 1.4826 * median(dev)
}

fn constrained_step() -> Result<Outcome> {
    let spec = PhantomSpec { kind: PhantomKind::Step, dims: [8, 6, 6], prior_confidence: 0.9, ..Default::default() };
    let phantom = generate_phantom(&spec)?;
    let pyramid = build_pyramid(spec.dims, 1)?;
    let volume = phantom.volume.padded(pyramid.finest_dims, |_| 0.0)?;
    let priors = phantom.priors.padded(pyramid.finest_dims, |c| if c == 0 { 1.0 } else { 0.0 })?;
    let mask = sobel3d(&phantom.volume, 0.9)?;
    // the mask must be exactly the two layers beside the step at x = 4
    let mut mask_ok = true;
    for z in 0..6 {
        for y in 0..6 {
            for x in 0..8 {
                mask_ok &= mask.mask[x + 8 * (y + 6 * z)] == (x == 3 || x == 4);
            }
        }
    }
    let mut sets_ok = true;
    let mut values_ok = true;
    let mut counts = [0usize; 4];
    for r in 0..=1 {
        let samples = aggregate(&pyramid, r, &volume, &priors)?;
        let boundary = graphwalk_core::constrained::boundary_samples(&pyramid, r, &mask)?;
        let topo = pyramid.topology(r)?;
        let sigma = mad_sigma(&samples, &topo, 1e-6)?;
        let w = graphwalk_core::robust::spatial_edge_weights(&samples, &topo, graphwalk_core::robust::WeightMode::Tukey(sigma))?;
        for c in 0..2 {
            let cats = categorize(&samples, &boundary, c)?;
            for (j, &cat) in cats.category.iter().enumerate() {
                let a = samples.prior(j)[c];
                let expected = if boundary[j] {
                    Category::Hard
                } else if a >= FORE_THRESHOLD {
                    Category::Fore
                } else if a <= BACK_THRESHOLD {
                    Category::Back
                } else {
                    Category::Rest
                };
                sets_ok &= cat == expected;
                counts[cat as usize] += 1;
            }
            let sol = solve_constrained(&w, &cats, &samples.prior_column(c), 0.5, &SolverOptions::default())?;
            for (j, &cat) in cats.category.iter().enumerate() {
                let want = match cat {
                    Category::Fore => Some(1.0f64),
                    Category::Back => Some(0.0),
                    Category::Hard => Some(0.5),
                    Category::Rest => None,
                };
                if let Some(v) = want {
                    values_ok &= sol.values[j].to_bits() == v.to_bits();
                }
            }
        }
    }
    outcome(
        mask_ok && sets_ok && values_ok && counts[0] > 0 && counts[1] > 0 && counts[2] > 0,
        format!(
            "Sobel mask is the step layers: {mask_ok}; categories match thresholds: {sets_ok}; \
             fixed values bit-exact: {values_ok} (fore {}, back {}, hard {}, rest {})",
            counts[0], counts[1], counts[2], counts[3]
        ),
    )
}

fn sir_reductions() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut reduce_gap: f64 = 0.0;
    for n in 3..=8 {
        // unit-degree graphs: a cycle with halves, and a complete graph
        let cycle: Vec<(usize, usize, f64)> = (0..n).map(|j| (j, (j + 1) % n, 0.5)).collect();
        let complete: Vec<(usize, usize, f64)> =
            (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b, 1.0 / (n - 1) as f64))).collect();
        for edges in [cycle, complete] {
            let weights = EdgeWeights::from_edges(n, &edges)?;
            let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let lambda = rng.random_range(0.1..1.0);
            let s = vec![rng.random_range(0.2..2.0); n];
            let mw = modified_weights_from_column(&weights, &s)?;
            let guided = solve(&assemble_with_known(&mw, &a, 1, lambda, &vec![None; n])?, &tight(SolverChoice::Auto))?.0;
            let plain = solve(&assemble_with_known(&weights, &a, 1, lambda, &vec![None; n])?, &tight(SolverChoice::Auto))?.0;
            reduce_gap = reduce_gap.max(inf_norm(guided.values(), plain.values()));
        }
    }

    let mut euler_gap: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=6);
        let edges = random_graph(&mut rng, n, 0.5);
        let weights = EdgeWeights::from_edges(n, &edges)?;
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
        let p0: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let d = weights.degrees().to_vec();
        let (dmin, dmax) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let smax = s.iter().copied().fold(0.0, f64::max);
        let dt = 0.5 / (smax * (1.0 + (dmax / dmin).sqrt()));
        let (p, _) = sir_iterate(&p0, &weights, &s, dt, 1e-14, 2_000_000)?;
        // steady state p_j ∝ sqrt(d_j) / s_j, with sum_j sqrt(d_j) p_j conserved
        let mass: f64 = (0..n).map(|j| d[j].sqrt() * p0[j]).sum();
        let shape: Vec<f64> = (0..n).map(|j| d[j].sqrt() / s[j]).collect();
        let norm: f64 = (0..n).map(|j| d[j].sqrt() * shape[j]).sum();
        let oracle: Vec<f64> = shape.iter().map(|v| v * mass / norm).collect();
        euler_gap = euler_gap.max(inf_norm(&p, &oracle));
    }
    outcome(
        reduce_gap <= 1e-6 && euler_gap <= 1e-6,
        format!("uniform guidance vs unguided {reduce_gap:.1e}; Euler fixed point vs steady state {euler_gap:.1e}"),
    )
}

fn geometry() -> Result<Outcome> {
    let sphere = icosphere(2.0, 3);
    let cs = curvature_tensors(&sphere, &sphere.vertex_normals());
    let typed: Vec<_> = cs.iter().flatten().collect();
    let sphere_err = typed.iter().map(|c| (c.k_max.abs() - 0.5).abs() / 0.5).sum::<f64>() / typed.len() as f64;

    let cyl = cylinder(1.0, 4.0, 48, 24);
    let cc = curvature_tensors(&cyl, &cyl.vertex_normals());
    let mut worst_angle: f64 = 0.0;
    for (v, c) in cyl.vertices.iter().zip(&cc) {
        if v[2] < 0.5 || v[2] > 3.5 {
            continue; // open rims
        }
        let Some(c) = c else { continue };
        let r = (v[0] * v[0] + v[1] * v[1]).sqrt();
        let circ = [-v[1] / r, v[0] / r, 0.0];
        let cos = (c.dir_max[0] * circ[0] + c.dir_max[1] * circ[1] + c.dir_max[2] * circ[2]).abs().min(1.0);
        worst_angle = worst_angle.max(cos.acos().to_degrees());
    }

    let dims = [20, 20, 30];
    let geom = SphereTubeGeometry::for_dims(dims);
    let analysis = SurfaceAnalysis::new(&geom.mesh(), Grid::unit(dims))?;
    let p = &analysis.populations;
    let disjoint = p.myocardium.hi < p.vessel.lo;
    let placed = p.myocardium.contains(1.0 / geom.sphere_radius) && p.vessel.contains(1.0 / geom.tube_radius);
    outcome(
        sphere_err <= 0.15 && worst_angle <= 10.0 && disjoint && placed,
        format!(
            "sphere mean relative error {:.1}%; cylinder worst angle {worst_angle:.2} deg; populations \
             [{:.3}, {:.3}] and [{:.3}, {:.3}] (disjoint {disjoint}, around 1/R and 1/r {placed})",
            100.0 * sphere_err,
            p.myocardium.lo,
            p.myocardium.hi,
            p.vessel.lo,
            p.vessel.hi
        ),
    )
}

fn end_to_end() -> Result<Outcome> {
    let start = Instant::now();
    let (base, inputs) = nested_inputs([24, 24, 24], 0.0, 0)?;
    let cfg = RunConfig { n_lay: 2, tune: true, weights: WeightKind::Plain, ..base.clone() };
    let run = run_with_inputs(&cfg, &inputs, None)?;
    let secs = start.elapsed().as_secs_f64();
    let m = run.metrics.expect("phantom has labels").pooled;

    let tukey_cfg = RunConfig { n_lay: 2, tune: true, ..base };
    let tukey_run = run_with_inputs(&tukey_cfg, &inputs, None)?;
    let t = tukey_run.metrics.expect("phantom has labels").pooled;
    outcome(
        m.precision >= 0.95 && m.recall >= 0.95 && secs < 60.0,
        format!(
            "plain weights, tuned: precision {:.4}, recall {:.4} in {secs:.1} s (lambda_prior {:?}, lambda_hcrf {}); \
             Tukey weights, tuned: precision {:.4}, recall {:.4}",
            m.precision, m.recall, run.layout.lambda_prior, run.layout.lambda_hcrf, t.precision, t.recall
        ),
    )
}

fn synthetic(p: f64, r: f64) -> Result<Metrics> {
    Ok(Metrics { per_class: Vec::new(), precision: p, recall: r })
}

fn hyperopt_protocol() -> Result<Outcome> {
    let mut found = 0;
    let seeds = 200;
    for seed in 0..seeds {
        let cfg = TunerConfig { seed, ..Default::default() };
        let out = tune(&cfg, 0, "peak", |v| {
            let q = 1.0 - (v - 0.7).abs();
            synthetic(q, q)
        })?;
        found += usize::from(out.best == 0.7);
    }
    let mut constant_ok = true;
    for seed in 0..50 {
        let cfg = TunerConfig { seed, ..Default::default() };
        constant_ok &= tune(&cfg, 0, "flat", |_| synthetic(0.5, 0.5))?.trials.len() == 21;
    }
    let log = |seed| -> Result<Vec<u8>> {
        let cfg = TunerConfig { seed, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let noise: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut i = 0;
        let out = tune(&cfg, 3, "noisy", |v| {
            i += 1;
            synthetic(v * noise[i % 1000], 1.0 - v * noise[(i + 7) % 1000])
        })?;
        let mut buf = Vec::new();
        write_trial_log(&[&out], &mut buf)?;
        Ok(buf)
    };
    let reproducible = log(11)? == log(11)? && log(11)? != log(12)?;
    outcome(
        found == seeds as usize && constant_ok && reproducible,
        format!("0.7 found for {found}/{seeds} seeds; constant objective stops at 21 trials: {constant_ok}; log reproducible: {reproducible}"),
    )
}

fn main() {
    let criteria: [(u32, &str, Criterion); 11] = [
        (1, "stationarity", stationarity),
        (2, "row-stochasticity and maximum principle", maximum_principle),
        (3, "oracle equivalence", oracle_equivalence),
        (4, "Dirichlet optimality", dirichlet_optimality),
        (5, "HCRF exactness", hcrf_exactness),
        (6, "robust-weight identities", robust_identities),
        (7, "constrained reductions", constrained_step),
        (8, "SIR reduction", sir_reductions),
        (9, "geometry accuracy", geometry),
        (10, "end-to-end phantom", end_to_end),
        (11, "hyperopt protocol", hyperopt_protocol),
    ];
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if pass { "PASS" } else { "FAIL" };
        let note = if !pass && KNOWN_CONFLICTS.contains(&id) { " (known conflict)" } else { "" };
        println!("{tag} [{id:>2}] {name}: {detail}{note}");
        if !pass && !KNOWN_CONFLICTS.contains(&id) {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("failed criteria: {unexpected:?}");
        std::process::exit(1);
    }
}
