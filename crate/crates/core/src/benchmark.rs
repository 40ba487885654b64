//! The two-state cubic benchmark system and its design data.
//!
//! `ẋ₁ = −x₁³ + x₁x₂²`, `ẋ₂ = −x₁²x₂ + x₁x₂² + u`, i.e.
//! `Z = (x₁³, x₁²x₂, x₁x₂², x₂³)`, `W = 1`.

use nalgebra::DMatrix;

use crate::data::TrueSystem;
use crate::poly::{FunctionLibrary, PolyMatrix, Polynomial};

fn x(i: usize) -> Polynomial {
    Polynomial::var(2, i)
}

fn z0() -> Polynomial {
    Polynomial::zero(2)
}

pub fn library() -> FunctionLibrary {
    let z = vec![
        x(0).pow(3),
        &x(0).pow(2) * &x(1),
        &x(0) * &x(1).pow(2),
        x(1).pow(3),
    ];
    FunctionLibrary::new(2, z, PolyMatrix::identity(1, 2)).expect("benchmark library is valid")
}

pub fn a_star() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 4, &[-1.0, 0.0, 1.0, 0.0, 0.0, -1.0, 1.0, 0.0])
}

pub fn b_star() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 1, &[0.0, 1.0])
}

pub fn system() -> TrueSystem {
    TrueSystem::new(a_star(), b_star(), library()).expect("benchmark dimensions agree")
}

pub fn x0() -> Vec<f64> {
    vec![2.0, -2.0]
}

/// Initial controller guess for the alternating programs: `−x₂³ − x₁x₂²`.
pub fn initial_controller() -> Vec<Polynomial> {
    vec![&(-&x(1).pow(3)) - &(&x(0) * &x(1).pow(2))]
}

/// `Ẑ = (x₁, x₂)` with `Z = H Ẑ`, for the actuator-disturbance program.
pub fn actuator_library() -> FunctionLibrary {
    let h = PolyMatrix::from_rows(
        vec![
            vec![x(0).pow(2), z0()],
            vec![&x(0) * &x(1), z0()],
            vec![z0(), &x(0) * &x(1)],
            vec![z0(), x(1).pow(2)],
        ],
        2,
    )
    .unwrap();
    library().with_factorization(vec![x(0), x(1)], h).expect("actuator factorization is exact")
}

/// `Ξ = Ẑ Ẑᵀ` for `Ẑ = (x₁, x₂)`.
pub fn actuator_xi() -> PolyMatrix {
    let c = &x(0) * &x(1);
    PolyMatrix::from_rows(vec![vec![x(0).pow(2), c.clone()], vec![c, x(1).pow(2)]], 2).unwrap()
}

/// `Ẑ = (x₁², x₂²)` with `Z = H Ẑ`, for the process-disturbance program.
pub fn process_library() -> FunctionLibrary {
    let h = PolyMatrix::from_rows(
        vec![vec![x(0), z0()], vec![x(1), z0()], vec![z0(), x(0)], vec![z0(), x(1)]],
        2,
    )
    .unwrap();
    library()
        .with_factorization(vec![x(0).pow(2), x(1).pow(2)], h)
        .expect("process factorization is exact")
}

/// `Ξ = diag(x₁², x₂²)`.
pub fn process_xi() -> PolyMatrix {
    PolyMatrix::from_rows(vec![vec![x(0).pow(2), z0()], vec![z0(), x(1).pow(2)]], 2).unwrap()
}
