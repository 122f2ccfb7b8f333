use std::sync::Arc;

use ftopinn::assemble::{evaluate_solution, newton_llsq, solve_llsq, NewtonConfig, SolutionBasis};
use ftopinn::basis::{make_random_feature, BasisSet, ScalarField};
use ftopinn::field_sampler::{GrfSampler, GrfSpec};
use ftopinn::oracle::{solve_diffusion_reaction, AdvectionUnitSpeedExact, Grid, InterfaceExact};
use ftopinn::problems::{sample_collocation, CollocationCounts, DataFn, ProblemSpec};

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[test]
fn advection_exact_member_is_recovered() {
    let p = ProblemSpec::advection(DataFn::Constant(1.0)).unwrap();
    let rest = make_random_feature(2, 2, 50, 100, 11).unwrap();
    let exact: Arc<dyn ScalarField> = Arc::new(AdvectionUnitSpeedExact);
    let basis = SolutionBasis::single(BasisSet::augmented(vec![exact.clone()], rest).unwrap());
    let c = sample_collocation(&p, CollocationCounts::default_for(&p), 3).unwrap();
    let sol = solve_llsq(&p, &basis, &c).unwrap();
    let pts = Grid::square(129).points();
    let u = evaluate_solution(&sol, &pts).unwrap();
    let truth: Vec<f64> = pts.iter().map(|x| exact.value(x)).collect();
    let e = rel_l2(&u, &truth);
    assert!(e < 1e-8, "rel L2 {e:e}");
}

#[test]
fn interface_exact_members_are_recovered() {
    let data = Arc::new(InterfaceExact::new(1.0).unwrap());
    let p = ProblemSpec::interface(2.0, 1.0, data.clone()).unwrap();
    let inner = BasisSet::augmented(
        vec![Arc::new(data.inner())],
        make_random_feature(2, 2, 50, 100, 1).unwrap(),
    )
    .unwrap();
    let outer = BasisSet::augmented(
        vec![Arc::new(data.outer())],
        make_random_feature(2, 2, 50, 100, 2).unwrap(),
    )
    .unwrap();
    let geometry = *p.geometry().unwrap();
    let basis = SolutionBasis::interface(inner, outer, geometry);
    let c = sample_collocation(&p, CollocationCounts::default_for(&p), 4).unwrap();
    let sol = solve_llsq(&p, &basis, &c).unwrap();
    let pts = Grid::symmetric(101).points();
    let u = evaluate_solution(&sol, &pts).unwrap();
    let truth: Vec<f64> = pts.iter().map(|x| data.u(x)).collect();
    let e = rel_l2(&u, &truth);
    assert!(e < 1e-8, "rel L2 {e:e}");
}

#[test]
fn random_feature_diffusion_reaction() {
    let mut sampler = GrfSampler::new(GrfSpec::rbf(0.2, 100, 21)).unwrap();
    let f = sampler.sample_rbf().unwrap();
    let p = ProblemSpec::diffusion_reaction(0.01, 0.01, DataFn::Grid(f.clone())).unwrap();
    let basis = SolutionBasis::single(make_random_feature(2, 3, 100, 500, 7).unwrap());
    let c = sample_collocation(&p, CollocationCounts::default_for(&p), 5).unwrap();
    let sol = newton_llsq(&p, &basis, &c, &vec![0.0; 500], NewtonConfig::default()).unwrap();
    let h = &sol.diagnostics.residual_history;
    assert!(h[1] < h[0]);
    let grid = Grid::square(129);
    let reference = solve_diffusion_reaction(&|x, _t| f.eval(x), 0.01, 0.01, Grid::square(257)).unwrap();
    let pts = grid.points();
    let u = evaluate_solution(&sol, &pts).unwrap();
    let truth: Vec<f64> = pts.iter().map(|x| reference.sample(x[0], x[1])).collect();
    let e = rel_l2(&u, &truth);
    eprintln!("RWM diffusion-reaction rel L2 {e:e} ({:?})", sol.diagnostics);
    assert!(e < 5e-2, "rel L2 {e:e}");
}
