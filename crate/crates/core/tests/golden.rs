//! Pinned outputs. A change here means old checkpoints and manifests no
//! longer reproduce.

use sha2::{Digest, Sha256};

use histotriplet::nn::{images_to_tensor, Encoder, EncoderConfig};
use histotriplet::seed::derive_seed;
use histotriplet::synthetic::{grating_dataset, GratingNoise};

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[test]
fn small_conv_embeddings_are_pinned() {
    let set = grating_dataset(3, 2, &GratingNoise::default(), 0);
    let images: Vec<_> = set.items().iter().map(|p| &p.image).collect();
    let encoder = Encoder::new(EncoderConfig::small_conv(), 0).unwrap();
    let e = encoder
        .embed_batch(&images_to_tensor(&images).unwrap())
        .unwrap();
    assert_eq!(e.dim(), (6, 128));
    let bytes: Vec<u8> = e.iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!(sha256_hex(&bytes), GOLDEN_SMALL_CONV);
}

#[test]
fn module_seeds_are_pinned() {
    assert_eq!(derive_seed(0, "sampler"), GOLDEN_SAMPLER_SEED);
}

const GOLDEN_SMALL_CONV: &str = "5196df1709b653e3752468d5673be63281d72df9a6588ae3919e83ce5f5d38d4";
const GOLDEN_SAMPLER_SEED: u64 = 17883177881599433564;
