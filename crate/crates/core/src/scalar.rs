use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Scalar type the whole crate is generic over: `f32` or `f64`.
///
/// All internal linear algebra goes through `nalgebra`, so `RealField`
/// supplies the arithmetic; the `num-traits` conversions let constants and
/// tolerances written as `f64` literals flow into the working type.
pub trait Scalar: RealField + FromPrimitive + ToPrimitive + Copy {}

impl<T: RealField + FromPrimitive + ToPrimitive + Copy> Scalar for T {}

/// Converts an `f64` constant into the working scalar type.
pub(crate) fn cast<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("finite f64 constant converts into the scalar type")
}

/// A tolerance stated for `f64`, widened so it stays meaningful for `f32`.
pub(crate) fn tol<T: Scalar>(base_f64: f64) -> T {
    let base = cast::<T>(base_f64);
    let eps_scaled = T::default_epsilon() * cast::<T>(64.0);
    if base > eps_scaled {
        base
    } else {
        eps_scaled
    }
}

/// Central-difference step for parameter `theta_j`: `eps^(1/3) * max(1, |theta_j|)`.
pub(crate) fn fd_step<T: Scalar>(theta_j: T) -> T {
    let h = T::default_epsilon().cbrt();
    h * T::max(T::one(), theta_j.abs())
}
