use super::Tensor;
use crate::error::{invalid, Result};

fn check_step(h: f64) -> Result<()> {
    if !(1e-5..=1e-2).contains(&h) {
        return invalid(format!("finite-difference step {h} outside [1e-5, 1e-2]"));
    }
    Ok(())
}

/// Central-difference gradient of a scalar function. Test oracle only.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Result<Tensor> {
    let idx: Vec<usize> = (0..x.numel()).collect();
    let g = finite_diff_partials(f, x, &idx, h)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), g))
}

/// Central differences for the selected flat coordinates only.
pub fn finite_diff_partials(
    f: impl Fn(&Tensor) -> f64,
    x: &Tensor,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    check_step(h)?;
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        // divide by the step actually realised after rounding
        out.push((up - down) / ((orig + h) - (orig - h)));
    }
    Ok(out)
}
