//! Central finite-difference verification of the analytic Jacobians.

use nalgebra::{DMatrix, DVector, Matrix6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    coupling_error, coupling_jacobian, fbg_jacobian, fbg_model, pose_meas_error, pose_meas_jacobian,
    prior_error, prior_jacobian, FactorKind, FBG_DEGENERATE,
};
use crate::liegroup::{exp_se3, log_se3, Pose, Strain6, Twist};
use crate::model::{EstimationProblem, FbgGeometry, PriorJacobianMode};

/// Rotation angles closer than this to π are excluded (the logarithm branch is singular there).
pub const PI_EXCLUSION: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct CheckSettings {
    pub trials: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub prior_mode: PriorJacobianMode,
    /// Negates the analytic Jacobian of one factor family before comparison.
    pub mutation: Option<FactorKind>,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            trials: 200,
            step: 1e-6,
            tolerance: 1e-5,
            seed: 0,
            prior_mode: PriorJacobianMode::Exact,
            mutation: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub kind: FactorKind,
    pub evaluated: usize,
    pub excluded: usize,
    /// `max |A − F| / max |F|` over all evaluated states.
    pub max_relative_error: f64,
    pub passed: bool,
}

/// A property asserted at a singular locus instead of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct LocusCheck {
    pub name: &'static str,
    pub trials: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub results: Vec<CheckResult>,
    pub loci: Vec<LocusCheck>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed) && self.loci.iter().all(|l| l.passed)
    }
}

/// Geometry the random states are drawn around: interval lengths, FBG geometries and coupling
/// offsets of a loaded problem, or generic defaults.
#[derive(Clone, Debug)]
pub struct CheckContext {
    pub intervals: Vec<f64>,
    pub geometries: Vec<FbgGeometry>,
    pub offsets: Vec<(Pose, Pose)>,
}

impl Default for CheckContext {
    fn default() -> Self {
        Self {
            intervals: vec![0.005, 0.01, 0.02, 0.04],
            geometries: vec![FbgGeometry::symmetric(35e-6)],
            offsets: Vec::new(),
        }
    }
}

impl CheckContext {
    pub fn from_problem(problem: &EstimationProblem) -> Self {
        let mut ctx = Self::default();
        let intervals: Vec<f64> = problem
            .topology
            .robots
            .iter()
            .flat_map(|r| r.node_arclengths.windows(2).map(|w| w[1] - w[0]))
            .collect();
        if !intervals.is_empty() {
            ctx.intervals = intervals;
        }
        let geometries: Vec<FbgGeometry> = problem.topology.robots.iter().filter_map(|r| r.fbg).collect();
        if !geometries.is_empty() {
            ctx.geometries = geometries;
        }
        ctx.offsets = problem
            .topology
            .couplings
            .iter()
            .map(|c| (c.offset_a, c.offset_b))
            .collect();
        ctx
    }
}

fn rotation_angle(x: &Twist) -> f64 {
    x.fixed_rows::<3>(3).norm()
}

fn random_twist(rng: &mut ChaCha8Rng, max_translation: f64, max_angle: f64) -> Twist {
    let axis = nalgebra::Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
    let angle = rng.random_range(0.0..max_angle);
    let rho = nalgebra::Vector3::from_fn(|_, _| rng.random_range(-max_translation..max_translation));
    Twist::new(rho[0], rho[1], rho[2], angle * axis[0], angle * axis[1], angle * axis[2])
}

fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
    exp_se3(&random_twist(rng, 0.5, 3.0))
}

fn random_strain(rng: &mut ChaCha8Rng) -> Strain6 {
    Strain6::new(
        1.0 + rng.random_range(-0.2..0.2),
        rng.random_range(-0.1..0.1),
        rng.random_range(-0.1..0.1),
        rng.random_range(-5.0..5.0),
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
    )
}

/// Central differences of `f` with respect to a 12-entry node perturbation `[δt; δε]` split
/// across `nodes` node states; pose columns are perturbed on the left.
fn numeric_jacobian<F>(poses: &[Pose], strains: &[Strain6], step: f64, f: F) -> DMatrix<f64>
where
    F: Fn(&[Pose], &[Strain6]) -> DVector<f64>,
{
    let rows = f(poses, strains).len();
    let n = poses.len();
    let mut jac = DMatrix::zeros(rows, 12 * n);
    for node in 0..n {
        for j in 0..12 {
            let eval = |sign: f64| {
                let mut p = poses.to_vec();
                let mut s = strains.to_vec();
                if j < 6 {
                    let mut d = Twist::zeros();
                    d[j] = sign * step;
                    p[node] = exp_se3(&d) * p[node];
                } else {
                    s[node][j - 6] += sign * step;
                }
                f(&p, &s)
            };
            let col = (eval(1.0) - eval(-1.0)) / (2.0 * step);
            jac.column_mut(12 * node + j).copy_from(&col);
        }
    }
    jac
}

fn relative_error(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>) -> f64 {
    (analytic - numeric).amax() / numeric.amax().max(1e-12)
}

struct Tally {
    kind: FactorKind,
    evaluated: usize,
    excluded: usize,
    worst: f64,
}

impl Tally {
    fn new(kind: FactorKind) -> Self {
        Self {
            kind,
            evaluated: 0,
            excluded: 0,
            worst: 0.0,
        }
    }

    fn record(&mut self, settings: &CheckSettings, mut analytic: DMatrix<f64>, numeric: &DMatrix<f64>) {
        if settings.mutation == Some(self.kind) {
            analytic = -analytic;
        }
        self.evaluated += 1;
        self.worst = self.worst.max(relative_error(&analytic, numeric));
    }

    fn finish(self, settings: &CheckSettings) -> CheckResult {
        CheckResult {
            kind: self.kind,
            evaluated: self.evaluated,
            excluded: self.excluded,
            max_relative_error: self.worst,
            passed: self.evaluated >= settings.trials && self.worst <= settings.tolerance,
        }
    }
}

fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn check_prior(settings: &CheckSettings, ctx: &CheckContext, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut tally = Tally::new(FactorKind::Prior);
    while tally.evaluated < settings.trials {
        let ds = ctx.intervals[rng.random_range(0..ctx.intervals.len())];
        let (eps_prev, eps) = (random_strain(rng), random_strain(rng));
        let t_prev = random_pose(rng);
        let t = exp_se3(&(ds * eps_prev + random_twist(rng, 0.05, 0.3))) * t_prev;
        if rotation_angle(&log_se3(&(t * t_prev.inverse()))) > std::f64::consts::PI - PI_EXCLUSION {
            tally.excluded += 1;
            continue;
        }
        let j = prior_jacobian(&t, &eps, &t_prev, ds, settings.prior_mode);
        let mut analytic = DMatrix::zeros(12, 24);
        analytic.view_mut((0, 0), (12, 12)).copy_from(&j.prev);
        analytic.view_mut((0, 12), (12, 12)).copy_from(&j.next);
        let numeric = numeric_jacobian(&[t_prev, t], &[eps_prev, eps], settings.step, |p, s| {
            dvec(prior_error(&p[1], &s[1], &p[0], &s[0], ds).as_slice())
        });
        tally.record(settings, analytic, &numeric);
    }
    tally.finish(settings)
}

fn check_pose(settings: &CheckSettings, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut tally = Tally::new(FactorKind::Pose);
    while tally.evaluated < settings.trials {
        let meas = random_pose(rng);
        let t = exp_se3(&random_twist(rng, 0.3, 3.1)) * meas;
        if rotation_angle(&pose_meas_error(&t, &meas)) > std::f64::consts::PI - PI_EXCLUSION {
            tally.excluded += 1;
            continue;
        }
        let mut analytic = DMatrix::zeros(6, 12);
        analytic.view_mut((0, 0), (6, 6)).copy_from(&pose_meas_jacobian(&t, &meas));
        let numeric = numeric_jacobian(&[t], &[Strain6::zeros()], settings.step, |p, _| {
            dvec(pose_meas_error(&p[0], &meas).as_slice())
        });
        tally.record(settings, analytic, &numeric);
    }
    tally.finish(settings)
}

fn check_fbg(settings: &CheckSettings, ctx: &CheckContext, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut tally = Tally::new(FactorKind::Fbg);
    while tally.evaluated < settings.trials {
        let g = ctx.geometries[rng.random_range(0..ctx.geometries.len())];
        let mut eps = random_strain(rng);
        // Away from the twist singularity.
        let twist: f64 = rng.random_range(0.1..5.0);
        eps[3] = if rng.random_bool(0.5) { twist } else { -twist };
        let Ok(j) = fbg_jacobian(&eps, &g) else {
            tally.excluded += 1;
            continue;
        };
        if (fbg_model(&eps, &g).add_scalar(1.0)).min() < 1e3 * FBG_DEGENERATE {
            tally.excluded += 1;
            continue;
        }
        let analytic = DMatrix::from_column_slice(4, 12, j.as_slice());
        let y = fbg_model(&random_strain(rng), &g);
        let numeric = numeric_jacobian(&[Pose::identity()], &[eps], settings.step, |_, s| {
            dvec((y - fbg_model(&s[0], &g)).as_slice())
        });
        tally.record(settings, analytic, &numeric);
    }
    tally.finish(settings)
}

fn check_coupling(settings: &CheckSettings, ctx: &CheckContext, rng: &mut ChaCha8Rng) -> CheckResult {
    let mut tally = Tally::new(FactorKind::Coupling);
    while tally.evaluated < settings.trials {
        let (off_a, off_b) = if ctx.offsets.is_empty() || rng.random_bool(0.5) {
            (exp_se3(&random_twist(rng, 0.1, 3.0)), exp_se3(&random_twist(rng, 0.1, 3.0)))
        } else {
            ctx.offsets[rng.random_range(0..ctx.offsets.len())]
        };
        let ta = random_pose(rng);
        let tb = off_b * exp_se3(&random_twist(rng, 0.2, 3.1)) * off_a.inverse() * ta;
        if rotation_angle(&coupling_error(&ta, &tb, &off_a, &off_b)) > std::f64::consts::PI - PI_EXCLUSION {
            tally.excluded += 1;
            continue;
        }
        let (ja, jb) = coupling_jacobian(&ta, &tb, &off_a, &off_b);
        let mut analytic = DMatrix::zeros(6, 24);
        analytic.view_mut((0, 0), (6, 6)).copy_from(&ja);
        analytic.view_mut((0, 12), (6, 6)).copy_from(&jb);
        let numeric = numeric_jacobian(&[ta, tb], &[Strain6::zeros(); 2], settings.step, |p, _| {
            dvec(coupling_error(&p[0], &p[1], &off_a, &off_b).as_slice())
        });
        tally.record(settings, analytic, &numeric);
    }
    tally.finish(settings)
}

/// At `ω⁽¹⁾ = 0` the outer-core rows of the twist column are exactly zero.
fn check_fbg_twist_locus(ctx: &CheckContext, rng: &mut ChaCha8Rng, trials: usize) -> LocusCheck {
    let mut passed = true;
    for _ in 0..trials {
        let g = ctx.geometries[rng.random_range(0..ctx.geometries.len())];
        let mut eps = random_strain(rng);
        eps[3] = 0.0;
        match fbg_jacobian(&eps, &g) {
            Ok(j) => passed &= (1..4).all(|row| j[(row, 9)] == 0.0),
            Err(_) => passed = false,
        }
    }
    LocusCheck {
        name: "fbg twist column is zero at zero twist",
        trials,
        passed,
    }
}

/// Pose and coupling Jacobians are exact `J⁻¹` forms, so they stay finite up to the π branch.
fn check_small_error_limit(rng: &mut ChaCha8Rng, trials: usize) -> LocusCheck {
    let mut passed = true;
    for _ in 0..trials {
        let t = random_pose(rng);
        passed &= (pose_meas_jacobian(&t, &t) - Matrix6::identity()).amax() < 1e-12;
    }
    LocusCheck {
        name: "pose jacobian is identity at zero error",
        trials,
        passed,
    }
}

pub fn run_jacobian_suite(settings: &CheckSettings, ctx: &CheckContext) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let results = vec![
        check_prior(settings, ctx, &mut rng),
        check_pose(settings, &mut rng),
        check_fbg(settings, ctx, &mut rng),
        check_coupling(settings, ctx, &mut rng),
    ];
    let loci = vec![
        check_fbg_twist_locus(ctx, &mut rng, 50),
        check_small_error_limit(&mut rng, 20),
    ];
    SuiteReport { results, loci }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_jacobians_pass() {
        let report = run_jacobian_suite(&CheckSettings::default(), &CheckContext::default());
        for r in &report.results {
            assert!(r.passed, "{:?}", r);
            assert_eq!(r.evaluated, 200);
        }
        assert!(report.loci.iter().all(|l| l.passed));
    }

    #[test]
    fn sign_flip_is_detected() {
        for kind in [FactorKind::Prior, FactorKind::Pose, FactorKind::Fbg, FactorKind::Coupling] {
            let settings = CheckSettings {
                trials: 10,
                mutation: Some(kind),
                ..Default::default()
            };
            let report = run_jacobian_suite(&settings, &CheckContext::default());
            let r = report.results.iter().find(|r| r.kind == kind).unwrap();
            assert!(!r.passed);
        }
    }

    #[test]
    fn first_order_prior_is_not_exact() {
        let settings = CheckSettings {
            trials: 50,
            prior_mode: PriorJacobianMode::FirstOrder,
            ..Default::default()
        };
        let report = run_jacobian_suite(&settings, &CheckContext::default());
        assert!(report.results[0].max_relative_error > settings.tolerance);
    }
}
