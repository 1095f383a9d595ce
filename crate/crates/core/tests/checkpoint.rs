mod common;

use common::{rng, uniform};
use vcmamba::harness::{gen_toy_dataset, train_step, AdamW, AdamWConfig, DatasetConfig};
use vcmamba::model::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, FORMAT_VERSION};
use vcmamba::{Error, Model, ModelSpec};

/// A Nano model whose running statistics and Θ tables are no longer at their
/// initial values.
fn trained_nano() -> Model<f32> {
    let mut m = Model::<f32>::build(ModelSpec::nano(), 4).unwrap();
    let data = gen_toy_dataset(&DatasetConfig { seed: 1, n_samples: 16, resolution: 32 }).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let idx: Vec<usize> = (0..16).collect();
    let (x, y) = data.batch(&idx).unwrap();
    for step in 0..2 {
        train_step(&mut m, &mut opt, &x, &y, step).unwrap();
    }
    m
}

fn with_crc(mut body: Vec<u8>) -> Vec<u8> {
    body.truncate(body.len() - 4);
    let crc = crc32fast::hash(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    body
}

#[test]
fn roundtrip_is_bit_exact_through_a_file() {
    let m = trained_nano();
    assert!(m.store().get("stages.3.blocks.0.ssm.theta").unwrap().data().iter().any(|&v| v != 0.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nano.vcmb");
    save_checkpoint(&m, &path).unwrap();
    let back: Model<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.spec(), m.spec());
    for ((n1, e1), (n2, e2)) in m.store().iter().zip(back.store().iter()) {
        assert_eq!(n1, n2);
        assert_eq!(e1.kind, e2.kind);
        let bits = |t: &vcmamba::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&e1.value), bits(&e2.value), "{n1}");
    }
    let x = uniform(&[4, 3, 32, 32], 0.0, 1.0, &mut rng(0)).cast::<f32>();
    let (a, b) = (m.predict(&x).unwrap(), back.predict(&x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn header_layout() {
    let m = Model::<f64>::build(ModelSpec::nano(), 0).unwrap();
    let bytes = encode_checkpoint(&m);
    assert_eq!(&bytes[..4], b"VCMB");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), FORMAT_VERSION);
    let spec_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let spec = std::str::from_utf8(&bytes[12..12 + spec_len]).unwrap();
    assert_eq!(ModelSpec::from_text(spec).unwrap(), ModelSpec::nano());
    let count = u32::from_le_bytes(bytes[12 + spec_len..16 + spec_len].try_into().unwrap());
    assert_eq!(count as usize, m.store().len());
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    assert_eq!(u32::from_le_bytes(tail.try_into().unwrap()), crc32fast::hash(body));
    // f64 data takes 8 bytes per element
    let numel: usize = m.store().iter().map(|(_, e)| e.value.numel()).sum();
    assert!(bytes.len() > numel * 8);
    assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(Error::Format(_))));
    let back: Model<f64> = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&back), bytes);
}

#[test]
fn damaged_files_are_rejected() {
    let bytes = encode_checkpoint(&trained_nano());
    for cut in [0, 3, 11, 100, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint::<f32>(&bytes[..cut]).is_err(), "truncated at {cut}");
    }
    let mut r = rng(5);
    use rand::Rng;
    for _ in 0..20 {
        let mut b = bytes.clone();
        let i = r.random_range(12..b.len());
        b[i] ^= 1 << r.random_range(0..8);
        assert!(matches!(decode_checkpoint::<f32>(&b), Err(Error::Format(_))));
    }
    let mut b = bytes.clone();
    b[..4].copy_from_slice(b"NOPE");
    assert!(matches!(decode_checkpoint::<f32>(&b), Err(Error::Format(_))));
    let mut b = bytes.clone();
    b[4..8].copy_from_slice(&7u32.to_le_bytes());
    match decode_checkpoint::<f32>(&b) {
        Err(e @ Error::Version { found: 7, .. }) => assert!(e.to_string().contains("version 7")),
        other => panic!("expected version error, got {:?}", other.err()),
    }
}

#[test]
fn consistent_checksum_but_wrong_contents_is_rejected() {
    let bytes = encode_checkpoint(&Model::<f32>::build(ModelSpec::nano(), 0).unwrap());
    let needle = b"head.bias";
    let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
    let mut renamed = bytes.clone();
    renamed[at + needle.len() - 1] = b'z';
    assert!(decode_checkpoint::<f32>(&with_crc(renamed)).is_err());

    // a trailing byte inside the checksummed region
    let mut extra = bytes.clone();
    extra.insert(bytes.len() - 4, 0);
    assert!(matches!(decode_checkpoint::<f32>(&with_crc(extra)), Err(Error::Format(_))));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint::<f32>(dir.path().join("absent")), Err(Error::Io(_))));
}
