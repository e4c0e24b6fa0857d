//! Check tape gradients of a small attention block against central differences.
//!
//! Usage: `cargo run --example gradcheck`

use contamlab::tensor::{finite_difference_check, Tensor};
use rand::{Rng, SeedableRng};

fn main() -> contamlab::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let inputs = vec![random(&[4, 6])?, random(&[6, 6])?, random(&[6])?, random(&[6])?];
    let check = finite_difference_check(
        |tape, v| {
            let q = tape.matmul(v[0], v[1])?;
            let kt = tape.transpose(v[0])?;
            let scores = tape.matmul(q, kt)?;
            let attn = tape.softmax(scores)?;
            let ctx = tape.matmul(attn, v[0])?;
            let y = tape.layer_norm(ctx, v[2], v[3], 1e-5)?;
            let y = tape.gelu(y)?;
            tape.sum(y)
        },
        &inputs,
        1e-6,
    )?;
    println!("max relative error {:.3e} (worst at {:?})", check.max_rel_error, check.worst);
    Ok(())
}
