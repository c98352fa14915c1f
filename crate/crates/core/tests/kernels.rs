use aes::cipher::{BlockEncrypt, KeyInit};
use leakscope::exec::{build_address_space, run_kernel, Marker, Recorder};
use leakscope::kernels::{ecc, KernelVariant, Style};
use leakscope::registry;
use leakscope::rng::substream;
use num_bigint::BigInt;
use num_traits::{One, Zero};
use rand::RngCore;

fn run(v: &KernelVariant, secret: &[u8], input: &[u8]) -> (Vec<u8>, Recorder) {
    let mut space = build_address_space(&v.spec(64), 64).unwrap();
    let mut rec = Recorder::default();
    let out = run_kernel(v, &mut space, secret, input, &mut [&mut rec]).unwrap();
    (out, rec)
}

#[test]
fn every_kernel_matches_its_reference() {
    let mut rng = substream(11, &[]);
    for e in registry::entries() {
        let v = e.variant;
        for trial in 0..6 {
            let secret = match trial {
                0 => v.degenerate_secrets()[0].clone(),
                1 => v.degenerate_secrets()[1].clone(),
                _ => v.random_secret(&mut rng),
            };
            let input = v.sample_input(&mut rng);
            let (out, _) = run(&v, &secret, &input);
            assert_eq!(out, v.reference(&secret, &input).unwrap(), "{} trial {trial}", v.name);
        }
    }
}

#[test]
fn probe_points_align_with_key_chunks() {
    let mut rng = substream(12, &[]);
    for e in registry::entries() {
        let v = e.variant;
        if matches!(v.style, Style::Aes { .. }) {
            continue;
        }
        for _ in 0..20 {
            let secret = v.random_secret(&mut rng);
            let input = v.sample_input(&mut rng);
            let (_, rec) = run(&v, &secret, &input);
            let steps = rec.markers.iter().filter(|m| **m == Marker::StepEnd).count();
            let begins = rec.markers.iter().filter(|m| **m == Marker::StepBegin).count();
            let chunks = v.chunks(&secret).unwrap();
            assert_eq!(steps, chunks.len(), "{}", v.name);
            assert_eq!(begins, steps, "{}", v.name);
        }
    }
}

#[test]
fn aes_kernels_match_an_independent_cipher() {
    let mut rng = substream(13, &[]);
    for name in ["aes-ttable", "aes-ttable-reused", "aes-sbox", "aes-sbox-prefetch"] {
        let v = registry::lookup(name).unwrap().variant;
        for _ in 0..50 {
            let mut key = [0u8; 16];
            let mut pt = [0u8; 16];
            rng.fill_bytes(&mut key);
            rng.fill_bytes(&mut pt);
            let (out, rec) = run(&v, &key, &pt);
            let cipher = aes::Aes128::new(&key.into());
            let mut block = pt.into();
            cipher.encrypt_block(&mut block);
            assert_eq!(out, block.to_vec(), "{name}");
            assert!(rec.markers.contains(&Marker::RoundEnd(1)));
        }
    }
}

// Affine arithmetic over arbitrary-precision integers.
fn big_add(
    p: &BigInt,
    a: &BigInt,
    x: Option<(BigInt, BigInt)>,
    y: Option<(BigInt, BigInt)>,
) -> Option<(BigInt, BigInt)> {
    let m = |v: BigInt| ((v % p) + p) % p;
    let inv = |v: &BigInt| m(v.clone()).modpow(&(p - 2u32), p);
    match (x, y) {
        (None, q) | (q, None) => q,
        (Some((x1, y1)), Some((x2, y2))) => {
            let l = if x1 == x2 {
                if m(&y1 + &y2).is_zero() {
                    return None;
                }
                m((BigInt::from(3) * &x1 * &x1 + a) * inv(&(BigInt::from(2) * &y1)))
            } else {
                m((&y2 - &y1) * inv(&(&x2 - &x1)))
            };
            let x3 = m(&l * &l - &x1 - &x2);
            let y3 = m(&l * (&x1 - &x3) - &y1);
            Some((x3, y3))
        }
    }
}

#[test]
fn ecc_scalar_multiplication_matches_bigint_oracle() {
    let p = BigInt::from(ecc::P);
    let a = BigInt::from(ecc::A);
    let (gx, gy) = ecc::G.unwrap();
    let g = Some((BigInt::from(gx), BigInt::from(gy)));
    let mut rng = substream(14, &[]);
    for _ in 0..10 {
        let k = rng.next_u64();
        let mut acc = None;
        for i in (0..64).rev() {
            acc = big_add(&p, &a, acc.clone(), acc);
            if (k >> i) & 1 == 1 {
                acc = big_add(&p, &a, acc, g.clone());
            }
        }
        let want = ecc::mul_reference(k, ecc::G);
        let want = want.map(|(x, y)| (BigInt::from(x), BigInt::from(y)));
        assert_eq!(acc, want);
    }
    assert!(BigInt::one() < p);
}
