use rand::Rng;

/// Chinese-restaurant-table count: the number of tables occupied after
/// seating `customers` with concentration `r`, i.e. Σₜ Bernoulli(r/(r+t−1)).
pub fn crt_draw<R: Rng + ?Sized>(customers: u64, r: f64, rng: &mut R) -> u64 {
    debug_assert!(r > 0.0);
    (0..customers)
        .filter(|&t| rng.random::<f64>() < r / (r + t as f64))
        .count() as u64
}

/// E[CRT(y, r)] = Σₜ r/(r+t−1).
pub fn crt_mean(customers: u64, r: f64) -> f64 {
    (0..customers).map(|t| r / (r + t as f64)).sum()
}
