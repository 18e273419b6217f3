//! The three corruption functions used by the denoising objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unmt::noise::NoiseKind;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let line = "nike dri fit running shoes for men";
    println!("original  {line}");
    for kind in [NoiseKind::Mask, NoiseKind::DropChar, NoiseKind::Shuffle] {
        for _ in 0..3 {
            println!("{:<9} {}", format!("{kind:?}").to_lowercase(), kind.apply(line, &mut rng));
        }
    }
}
