//! Scalar abstraction for the closed-form calculators.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

/// Floating point type the analytic calculators are generic over.
pub trait Real: Float + FromPrimitive + Debug + Send + Sync + 'static {
    /// Lossy conversion from a count or probability.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to Real")
    }
}

impl<T> Real for T where T: Float + FromPrimitive + Debug + Send + Sync + 'static {}
