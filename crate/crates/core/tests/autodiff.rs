use prefopt::autodiff::{finite_diff_check, CheckOptions, Node, ParamId, StopHandling, Tape};
use proptest::prelude::*;

/// One step of a random program. Operands index earlier values; every op is
/// composed so its input stays inside the primitive's domain.
#[derive(Debug, Clone)]
enum Op {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a / (1 + b²)`
    Div(usize, usize),
    /// `exp(log σ(a))`
    Exp(usize),
    /// `ln(softplus(a) + 0.5)`
    Log(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Softplus(usize),
    Stop(usize),
    /// `a · sg(b)`
    MulStopped(usize, usize),
}

fn op(n: usize) -> impl Strategy<Value = Op> {
    let i = 0..n;
    let j = 0..n;
    prop_oneof![
        (i.clone(), j.clone()).prop_map(|(a, b)| Op::Add(a, b)),
        (i.clone(), j.clone()).prop_map(|(a, b)| Op::Sub(a, b)),
        (i.clone(), j.clone()).prop_map(|(a, b)| Op::Mul(a, b)),
        (i.clone(), j.clone()).prop_map(|(a, b)| Op::Div(a, b)),
        i.clone().prop_map(Op::Exp),
        i.clone().prop_map(Op::Log),
        i.clone().prop_map(Op::Sigmoid),
        i.clone().prop_map(Op::LogSigmoid),
        i.clone().prop_map(Op::Softplus),
        i.clone().prop_map(Op::Stop),
        (i, j).prop_map(|(a, b)| Op::MulStopped(a, b)),
    ]
}

#[derive(Debug, Clone)]
struct Program {
    params: Vec<f64>,
    ops: Vec<Op>,
}

fn program() -> impl Strategy<Value = Program> {
    (1usize..=4, 1usize..=10)
        .prop_flat_map(|(np, nops)| {
            let params = prop::collection::vec(-2.0f64..2.0, np);
            let ops: Vec<_> = (0..nops).map(|k| op(np + k)).collect();
            (params, ops)
        })
        .prop_map(|(params, ops)| Program { params, ops })
}

fn build<'t>(tape: &'t Tape, vars: &[Node<'t>], ops: &[Op]) -> Node<'t> {
    let mut v: Vec<Node<'t>> = vars.to_vec();
    for o in ops {
        let n = match *o {
            Op::Add(a, b) => v[a] + v[b],
            Op::Sub(a, b) => v[a] - v[b],
            Op::Mul(a, b) => v[a] * v[b],
            Op::Div(a, b) => v[a] / (v[b].square() + 1.0),
            Op::Exp(a) => v[a].log_sigmoid().exp(),
            Op::Log(a) => (v[a].softplus() + 0.5).ln(),
            Op::Sigmoid(a) => v[a].sigmoid(),
            Op::LogSigmoid(a) => v[a].log_sigmoid(),
            Op::Softplus(a) => v[a].softplus(),
            Op::Stop(a) => tape.stop_gradient(v[a]),
            Op::MulStopped(a, b) => v[a] * tape.stop_gradient(v[b]),
        };
        v.push(n);
    }
    // Touch every value so parameters that feed nothing still appear.
    let last = *v.last().expect("non-empty");
    last + tape.sum(&v) * 0.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn backward_matches_central_differences(p in program()) {
        let ops = p.ops.clone();
        let report = finite_diff_check(
            move |tape, vars| build(tape, vars, &ops),
            &p.params,
            &CheckOptions { step: 1e-4, tol: 1e-5, ..Default::default() },
        );
        prop_assert!(report.passed(), "{:?}\n{:?}", p, report);
    }

    #[test]
    fn stop_gradient_is_value_transparent(x in -1e6f64..1e6) {
        let tape = Tape::new();
        let a = tape.param(ParamId(0), x);
        prop_assert_eq!(tape.stop_gradient(a).value().to_bits(), x.to_bits());
        let y = a.sigmoid() * a;
        prop_assert_eq!(tape.stop_gradient(y).value().to_bits(), y.value().to_bits());
    }

    #[test]
    fn gradient_is_linear(p in program(), q in program(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        // Both programs read the first parameter vector.
        let n = p.params.len().min(q.params.len());
        let params = &p.params[..n];
        let remap = |ops: &[Op], width: usize| -> Vec<Op> {
            let f = |i: usize| if i < width { i % n } else { i - width + n };
            ops.iter().map(|o| match *o {
                Op::Add(x, y) => Op::Add(f(x), f(y)),
                Op::Sub(x, y) => Op::Sub(f(x), f(y)),
                Op::Mul(x, y) => Op::Mul(f(x), f(y)),
                Op::Div(x, y) => Op::Div(f(x), f(y)),
                Op::Exp(x) => Op::Exp(f(x)),
                Op::Log(x) => Op::Log(f(x)),
                Op::Sigmoid(x) => Op::Sigmoid(f(x)),
                Op::LogSigmoid(x) => Op::LogSigmoid(f(x)),
                Op::Softplus(x) => Op::Softplus(f(x)),
                Op::Stop(x) => Op::Stop(f(x)),
                Op::MulStopped(x, y) => Op::MulStopped(f(x), f(y)),
            }).collect()
        };
        let (pf, qf) = (remap(&p.ops, p.params.len()), remap(&q.ops, q.params.len()));
        let grad = |which: u8| -> Vec<f64> {
            let tape = Tape::new();
            let vars: Vec<_> = params.iter().enumerate().map(|(i, &x)| tape.param(ParamId(i), x)).collect();
            let out = match which {
                0 => build(&tape, &vars, &pf),
                1 => build(&tape, &vars, &qf),
                _ => build(&tape, &vars, &pf) * a + build(&tape, &vars, &qf) * b,
            };
            out.backward().unwrap().to_dense(n)
        };
        let (gf, gg, gs) = (grad(0), grad(1), grad(2));
        for i in 0..n {
            let expect = a * gf[i] + b * gg[i];
            prop_assert!((gs[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0), "{} vs {}", gs[i], expect);
        }
    }
}

#[test]
fn unreachable_parameters_get_exact_zero() {
    let tape = Tape::new();
    let x = tape.param(ParamId(0), 1.5);
    let _y = tape.param(ParamId(1), -0.5);
    let g = (x.sigmoid() * x).backward().unwrap();
    assert_eq!(g.get(ParamId(1)), 0.0);
    assert!(g.get(ParamId(0)) != 0.0);
}

#[test]
fn live_stops_disagree_where_frozen_agree() {
    // f(x) = sg(x) * x: backward gives sg(x) = 1 at x = 1, the value's
    // derivative is 2.
    let frozen = finite_diff_check(|t, v| t.stop_gradient(v[0]) * v[0], &[1.0], &CheckOptions::default());
    assert!(frozen.passed());
    assert!((frozen.analytic[0] - 1.0).abs() < 1e-12);
    let live = finite_diff_check(
        |t, v| t.stop_gradient(v[0]) * v[0],
        &[1.0],
        &CheckOptions {
            stops: StopHandling::Live,
            ..Default::default()
        },
    );
    assert!(!live.passed());
    assert!((live.numeric[0] - 2.0).abs() < 1e-8);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let tape = Tape::new();
        let xs: Vec<_> = (0..20).map(|i| tape.param(ParamId(i), i as f64 * 0.1 - 1.0)).collect();
        let terms: Vec<_> = xs.windows(2).map(|w| (w[0] * w[1]).log_sigmoid()).collect();
        tape.sum(&terms).backward().unwrap().to_dense(20)
    };
    let a = run();
    let b = run();
    assert_eq!(
        a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
}
