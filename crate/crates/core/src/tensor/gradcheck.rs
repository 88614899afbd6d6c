//! Central finite-difference oracle for the reverse-mode engine.

use super::{Graph, OpKind, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Finite-difference checker over functions of several tensor inputs.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Backward rule to sabotage on the analytic pass.
    pub fault: Option<OpKind>,
}

/// How a function's output becomes the checked scalar.
#[derive(Clone, Copy)]
enum Readout<'a> {
    Scalar,
    /// `sum(w ⊙ y)`, evaluated off the tape.
    Weighted(&'a Tensor),
}

impl GradCheck {
    pub fn new(step: f64) -> Self {
        Self { step, fault: None }
    }

    pub fn with_fault(mut self, fault: Option<OpKind>) -> Self {
        self.fault = fault;
        self
    }

    fn eval<F>(&self, f: &F, inputs: &[Tensor], readout: Readout<'_>) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        match readout {
            Readout::Scalar => scalar_of(&g, out),
            Readout::Weighted(w) => weighted(&g, out, w),
        }
    }

    fn analytic<F>(&self, f: &F, inputs: &[Tensor], readout: Readout<'_>) -> Result<Vec<Tensor>>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::with_fault(self.fault);
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        match readout {
            Readout::Scalar => {
                scalar_of(&g, out)?;
                g.backward(out)?;
            }
            Readout::Weighted(w) => {
                weighted(&g, out, w)?;
                g.backward_from(out, w)?;
            }
        }
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    }

    fn numeric<F>(
        &self,
        f: &F,
        inputs: &[Tensor],
        readout: Readout<'_>,
        which: usize,
        coord: usize,
    ) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut shifted = inputs.to_vec();
        let base = inputs[which].data()[coord];
        shifted[which].data_mut()[coord] = base + self.step;
        let up = self.eval(f, &shifted, readout)?;
        shifted[which].data_mut()[coord] = base - self.step;
        let down = self.eval(f, &shifted, readout)?;
        Ok((up - down) / (2.0 * self.step))
    }

    /// Worst relative error over every coordinate of every input.
    pub fn run<F>(&self, f: F, inputs: &[Tensor]) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |c| (i, c)))
            .collect();
        self.run_subset(f, inputs, &coords)
    }

    /// Worst relative error over the listed `(input, coordinate)` pairs.
    pub fn run_subset<F>(&self, f: F, inputs: &[Tensor], coords: &[(usize, usize)]) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        self.check(&f, inputs, coords, Readout::Scalar)
    }

    /// Like [`GradCheck::run`] for a function of any output shape, checked
    /// through the fixed projection `sum(weights ⊙ f(x))`.
    pub fn run_weighted<F>(&self, f: F, inputs: &[Tensor], weights: &Tensor) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let coords: Vec<(usize, usize)> = inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.numel()).map(move |c| (i, c)))
            .collect();
        self.check(&f, inputs, &coords, Readout::Weighted(weights))
    }

    fn check<F>(
        &self,
        f: &F,
        inputs: &[Tensor],
        coords: &[(usize, usize)],
        readout: Readout<'_>,
    ) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        if !(self.step > 0.0) {
            return Err(Error::Contract(
                "finite-difference step must be positive".into(),
            ));
        }
        let grads = self.analytic(f, inputs, readout)?;
        let mut worst = 0.0f64;
        for &(which, coord) in coords {
            let n = self.numeric(f, inputs, readout, which, coord)?;
            let a = grads[which].data()[coord];
            let e = relative_error(a, n);
            worst = if e.is_nan() {
                f64::INFINITY
            } else {
                worst.max(e)
            };
        }
        Ok(worst)
    }
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck needs a scalar-valued function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

fn weighted(g: &Graph, v: Var, w: &Tensor) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != w.numel() {
        return Err(Error::shape("gradcheck readout", w.shape(), t.shape()));
    }
    Ok(t.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
}

/// Single-input convenience wrapper around [`GradCheck::run`].
pub fn gradcheck<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    GradCheck::new(step).run(|g, v| f(g, v[0]), std::slice::from_ref(x))
}

/// Multi-input check restricted to a coordinate subset.
pub fn gradcheck_subset<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    step: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    GradCheck::new(step).run_subset(f, inputs, coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_zero_error() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 4.0]).unwrap();
        let err = gradcheck(|g, x| Ok(g.sum(x)), &x, 1e-4).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = gradcheck(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_scalar_output_is_contract_error() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let err = gradcheck(|g, x| Ok(g.exp(x)), &x, 1e-4).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 0.5).abs() < 1e-15);
    }
}
