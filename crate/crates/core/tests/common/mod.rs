use cmt::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Graph<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> cmt::Result<Var>;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Scalar `Σ w ⊙ f(inputs)` with fixed pseudo-random weights `w`.
fn reduce(tape: &mut Tape, out: Var) -> Var {
    if tape.shape(out).is_empty() {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let w = random(tape.shape(out), &mut rng);
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

fn value(inputs: &[Tensor], f: Graph) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = reduce(&mut tape, out);
    tape.item(s)
}

/// Largest norm-wise relative error between reverse-mode and central
/// finite-difference gradients over all inputs.
pub fn gradcheck(inputs: &[Tensor], f: Graph) -> f64 {
    gradcheck_each(inputs, f, 1e-4).into_iter().fold(0.0, f64::max)
}

/// Per-input relative errors, in input order.
pub fn gradcheck_each(inputs: &[Tensor], f: Graph, h: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars).unwrap();
    let s = reduce(&mut tape, out);
    tape.backward(s).unwrap();
    let mut errors = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            *n = (value(&plus, f) - value(&minus, f)) / (2.0 * h);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    errors
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // Gradients that vanish analytically (key biases under softmax) have no
    // relative scale; compare those absolutely against the FD noise.
    if norm(a) < 1e-10 {
        return diff;
    }
    diff / norm(a).max(norm(b))
}

/// Prints and records one criterion line.
pub struct Ledger {
    failures: Vec<String>,
}

impl Ledger {
    pub fn new() -> Self {
        Ledger { failures: Vec::new() }
    }

    pub fn record(&mut self, id: &str, title: &str, pass: bool, detail: &str) {
        println!("{id} {title}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures.push(id.to_string());
        }
    }

    pub fn failures(&self) -> &[String] {
        &self.failures
    }
}
