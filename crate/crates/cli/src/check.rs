//! Self-test suites behind `dcsat check`.

use dcsat::exec::Exec;
use dcsat::linalg::{axpy, dot, DenseMatrix};
use dcsat::losses::{bound_from_linearization, SensedModel};
use dcsat::network::{Activation, DenseNet};
use dcsat::rng::{mix, stream, Purpose};
use dcsat::sensing::make_sampler;
use dcsat::trustregion::{oracle_inner_max_with, solve_inner_max, verify_kkt, OracleSettings};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct CheckOptions {
    pub instances: usize,
    pub restarts: usize,
    pub nets: usize,
    pub seed: u64,
    /// Shrinks every solver answer slightly, which must be caught.
    pub perturb_solution: bool,
    pub exec: Exec,
}

#[derive(Default)]
pub struct CheckReport {
    pub lines: Vec<String>,
    pub failures: Vec<String>,
}

impl CheckReport {
    fn suite(&mut self, name: &str, ran: usize, failures: Vec<String>) {
        let status = if failures.is_empty() { "ok" } else { "FAILED" };
        self.lines
            .push(format!("{name}: {ran} cases, {} failures ... {status}", failures.len()));
        self.failures
            .extend(failures.into_iter().map(|f| format!("{name}: {f}")));
    }
}

fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

fn trust_region(opts: &CheckOptions) -> (usize, Vec<String>) {
    let settings = OracleSettings::default();
    let results = opts.exec.map(opts.instances, |i| {
        let mut rng = stream(opts.seed, Purpose::Data, i as u64);
        let k = rng.random_range(2..=5);
        let m = rng.random_range(2..=6);
        let p = gaussian(m, k, &mut rng);
        let y: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut fails = Vec::new();
        for eps in [0.1, 1.0, 10.0] {
            let case = format!("instance {i} (m={m}, k={k}, eps={eps})");
            let mut sol = match solve_inner_max(&p, &y, eps) {
                Ok(s) => s,
                Err(e) => {
                    fails.push(format!("{case}: {e}"));
                    continue;
                }
            };
            if opts.perturb_solution {
                sol.delta_z.iter_mut().for_each(|x| *x *= 0.999);
            }
            let mut r = y.clone();
            axpy(-1.0, &p.matvec(&sol.delta_z).expect("shapes"), &mut r);
            let direct = dot(&r, &r);
            if (direct - sol.value).abs() > 1e-9 * direct.max(1.0) {
                fails.push(format!("{case}: value {} but residual gives {direct}", sol.value));
            }
            match verify_kkt(&p, &y, eps, &sol) {
                Ok(kkt) if !kkt.holds(1e-8) => fails.push(format!("{case}: KKT residual {:e}", kkt.worst())),
                Err(e) => fails.push(format!("{case}: {e}")),
                _ => {}
            }
            let seed = mix(opts.seed, i as u64);
            match oracle_inner_max_with(&p, &y, eps, opts.restarts, seed, settings, Exec::Sequential) {
                Ok(o) if direct < o - 1e-6 * (1.0 + o) => {
                    fails.push(format!("{case}: value {direct} below projected-gradient {o}"))
                }
                Err(e) => fails.push(format!("{case}: oracle: {e}")),
                _ => {}
            }
        }
        fails
    });
    (opts.instances * 3, results.into_iter().flatten().collect())
}

fn smooth_net(seed: u64) -> (DenseNet, Vec<f64>) {
    let mut rng = stream(seed, Purpose::Data, 0);
    let k = rng.random_range(2..=30);
    let h = rng.random_range(2..=20);
    let n = rng.random_range(2..=15);
    let acts = [Activation::Tanh, Activation::Sigmoid];
    let net = DenseNet::seeded(&[k, h, n], &acts, seed).expect("valid dims");
    let z = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
    (net, z)
}

fn jacobian(opts: &CheckOptions) -> (usize, Vec<String>) {
    let fails = opts.exec.map(opts.nets, |i| {
        let (net, z) = smooth_net(mix(opts.seed, 1000 + i as u64));
        let exact = net.jacobian_at(&z).expect("dims");
        let fd = net.finite_diff_jacobian(&z, 1e-5).expect("dims");
        let dev = exact.max_abs_diff(&fd);
        (dev > 1e-6).then(|| format!("net {i} {:?}: max deviation {dev:e}", net.dims()))
    });
    (opts.nets, fails.into_iter().flatten().collect())
}

fn bound(opts: &CheckOptions) -> (usize, Vec<String>) {
    let fails = opts.exec.map(opts.instances, |i| {
        let (net, z) = smooth_net(mix(opts.seed, 5000 + i as u64));
        let n = net.output_dim();
        let phi = make_sampler(n, 0.5, mix(opts.seed, i as u64)).expect("sr");
        let mut rng = stream(opts.seed, Purpose::Data, 9000 + i as u64);
        let y: Vec<f64> = (0..phi.sensed_dim()).map(|_| rng.random()).collect();
        let eps = [0.1, 1.0, 10.0][i % 3];
        let lin = SensedModel::new(&net, &phi)
            .and_then(|m| m.linearize(&z, &y))
            .expect("dims");
        match lin.solve(eps) {
            Ok(s) => {
                let b = bound_from_linearization(&lin, eps);
                (s.value > b * (1.0 + 1e-12)).then(|| format!("instance {i}: exact {} > bound {b}", s.value))
            }
            Err(e) => Some(format!("instance {i}: {e}")),
        }
    });
    (opts.instances, fails.into_iter().flatten().collect())
}

pub fn run(opts: &CheckOptions) -> CheckReport {
    let mut report = CheckReport::default();
    let (n, f) = trust_region(opts);
    report.suite("trust-region vs projected gradient", n, f);
    let (n, f) = jacobian(opts);
    report.suite("jacobian vs central differences", n, f);
    let (n, f) = bound(opts);
    report.suite("surrogate bound", n, f);
    report
}
