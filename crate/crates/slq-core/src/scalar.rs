/// scalar type the solvers are generic over: f32 or f64
pub trait Real:
    nalgebra::RealField + Copy + num_traits::FromPrimitive + num_traits::ToPrimitive
{
}

impl<T> Real for T where
    T: nalgebra::RealField + Copy + num_traits::FromPrimitive + num_traits::ToPrimitive
{
}

/// shorthand for embedding an f64 literal into the working scalar type
#[inline]
pub(crate) fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal not representable in scalar type")
}
