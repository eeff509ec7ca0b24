use ndarray::Array2;
use rvae::data::{Cell, FeatureSpec, TableSchema};
use rvae::generative::{draw_noise, objective, Gate, NetworkShape, OutlierComponents, RvaeNetwork};
use rvae::nn::{Parameters, SeededRng};

fn schema() -> TableSchema {
    TableSchema::new(vec![
        FeatureSpec::real("a"),
        FeatureSpec::categorical("k", ["x", "y", "z"]),
        FeatureSpec::real("b"),
        FeatureSpec::categorical("m", ["p", "q"]),
    ])
    .unwrap()
}

fn rows() -> Vec<Vec<Cell>> {
    vec![
        vec![Cell::Real(0.4), Cell::Cat(1), Cell::Real(-1.3), Cell::Cat(0)],
        vec![Cell::Real(-2.1), Cell::Cat(2), Cell::Real(0.2), Cell::Cat(1)],
        vec![Cell::Real(0.9), Cell::Cat(1), Cell::Real(3.5), Cell::Cat(1)],
    ]
}

fn network(amortized: bool) -> RvaeNetwork {
    let shape = NetworkShape {
        hidden: 7,
        latent: 3,
        embedding_dim: 4,
        amortized,
    };
    let mut net = RvaeNetwork::new(&schema(), shape, &mut SeededRng::new(21)).unwrap();
    // move log sigma off zero so its gradient is exercised away from the default
    for (i, v) in net.decoder.log_sigma.iter_mut().enumerate() {
        *v = 0.3 - 0.5 * i as f64;
    }
    net
}

fn loss_at(net: &RvaeNetwork, comp: &OutlierComponents, eps: &Array2<f64>, gate: Gate<'_>) -> f64 {
    let rs = rows();
    let refs: Vec<&[Cell]> = rs.iter().map(|r| r.as_slice()).collect();
    objective(net, comp, &refs, eps.view(), gate, false).unwrap().loss
}

fn check(gate_for: impl Fn() -> Gate<'static>, amortized: bool) {
    let net = network(amortized);
    let comp = OutlierComponents::new(&net.schema, 2.0).unwrap();
    let eps = draw_noise(&mut SeededRng::new(5), 3, 3);
    let rs = rows();
    let refs: Vec<&[Cell]> = rs.iter().map(|r| r.as_slice()).collect();
    let grads = objective(&net, &comp, &refs, eps.view(), gate_for(), true)
        .unwrap()
        .grads
        .unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .params()
        .into_iter()
        .map(|p| (p.name.clone(), p.data.to_vec()))
        .collect();

    let h = 1e-5;
    let mut probe = net.clone();
    let n_tensors = probe.params().len();
    assert_eq!(n_tensors, analytic.len());
    let mut checked = 0;
    for t in 0..n_tensors {
        let len = probe.params()[t].data.len();
        let step = (len / 6).max(1);
        for i in (0..len).step_by(step) {
            let orig = probe.params()[t].data[i];
            probe.params_mut()[t].data[i] = orig + h;
            let up = loss_at(&probe, &comp, &eps, gate_for());
            probe.params_mut()[t].data[i] = orig - h;
            let down = loss_at(&probe, &comp, &eps, gate_for());
            probe.params_mut()[t].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let exact = analytic[t].1[i];
            let tol = 1e-5 * (1.0 + numeric.abs().max(exact.abs()));
            assert!(
                (numeric - exact).abs() < tol,
                "{}[{i}]: numeric {numeric} analytic {exact}",
                analytic[t].0
            );
            checked += 1;
        }
    }
    assert!(checked > 40);
}

#[test]
fn ungated_gradient_matches_finite_differences() {
    check(|| Gate::Ungated, false);
}

#[test]
fn fixed_gate_gradient_matches_finite_differences() {
    static PI: std::sync::OnceLock<Array2<f64>> = std::sync::OnceLock::new();
    let pi = PI.get_or_init(|| ndarray::array![[0.9, 0.2, 1.0, 0.5], [0.0, 0.7, 0.6, 1.0], [0.3, 0.3, 0.95, 0.1]]);
    check(|| Gate::Fixed { pi, alpha: 0.9 }, false);
}

// at the coordinate optimum the gate's own derivative vanishes, so holding it
// fixed gives the total derivative
#[test]
fn coordinate_gate_gradient_matches_finite_differences() {
    check(|| Gate::Coordinate { alpha: 0.95 }, false);
}

#[test]
fn amortized_gate_gradient_matches_finite_differences() {
    check(|| Gate::Amortized { alpha: 0.8 }, true);
}
