//! Wire-format guarantees: round-trips are bit-exact, corrupted inputs are
//! rejected with the specific error each failure mode documents, and training
//! is reproducible down to the checkpoint bytes.

mod common;

use common::{rand_clip, TEST_TAG};
use fewmatch::archive::{
    read_archive_bytes, save_feature_archive, write_archive_bytes, ARCHIVE_MAGIC,
};
use fewmatch::checkpoint::{
    read_checkpoint_bytes, write_checkpoint_bytes, RawTensor, CHECKPOINT_MAGIC,
};
use fewmatch::config::TrainConfig;
use fewmatch::episode::{Dataset, Split, VideoClip};
use fewmatch::rng::stream;
use fewmatch::training::{train, EpisodeSource};
use fewmatch::Error;
use proptest::prelude::*;
use rand::Rng;

fn sample_clips(seed: u64, count: usize) -> Vec<VideoClip> {
    let mut rng = stream(seed, TEST_TAG, 1);
    (0..count)
        .map(|i| {
            let class = (i / 2) as u32;
            rand_clip(&mut rng, class, i as u32, 3, 4, 5, 2)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Round-trips.
// ---------------------------------------------------------------------------

#[test]
fn archive_round_trip_is_bit_exact() {
    let clips = sample_clips(21, 7);
    let bytes = write_archive_bytes(&clips).unwrap();
    let back = read_archive_bytes(&bytes).unwrap();
    assert_eq!(back.len(), clips.len());
    for (a, b) in clips.iter().zip(&back) {
        assert_eq!(a.class_id, b.class_id);
        assert_eq!(a.clip_id, b.clip_id);
        assert_eq!(a.shape(), b.shape());
        // Bit-exact, not approximately equal.
        let raw = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(raw(&a.data), raw(&b.data));
    }
    let again = write_archive_bytes(&back).unwrap();
    assert_eq!(bytes, again, "re-serialization changed the bytes");
}

#[test]
fn archive_disk_round_trip_preserves_split_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clips.m3fa");
    let dataset = Dataset::new(sample_clips(22, 6), Split::Base).unwrap();
    save_feature_archive(&dataset, &path).unwrap();
    let back = fewmatch::archive::load_feature_archive(&path).unwrap();
    assert_eq!(back.len(), dataset.len());
    assert_eq!(back.classes(), dataset.classes());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = stream(23, TEST_TAG, 0);
    let tensors: Vec<RawTensor> = (0..5)
        .map(|i| {
            let rows = rng.random_range(1..4u32);
            let cols = rng.random_range(1..6u32);
            RawTensor {
                name: format!("group.{i}"),
                dims: vec![rows, cols],
                data: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
            }
        })
        .collect();
    let bytes = write_checkpoint_bytes(&tensors).unwrap();
    let back = read_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back, tensors);
    assert_eq!(write_checkpoint_bytes(&back).unwrap(), bytes);
}

#[test]
fn config_text_round_trip() {
    let mut cfg = TrainConfig::default();
    cfg.n_way = 3;
    cfg.learning_rate = 0.025;
    cfg.enable_cm = false;
    cfg.archive_path = "some/dir/clips.m3fa".into();
    let text = cfg.serialize();
    let back = TrainConfig::parse(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.serialize(), text);
}

proptest! {
    // Archives of arbitrary small shapes survive the byte round-trip.
    #[test]
    fn archive_round_trip_any_shape(
        t in 1usize..4,
        h in 1usize..5,
        w in 1usize..5,
        c in 1usize..4,
        n in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = stream(seed, TEST_TAG, 2);
        let clips: Vec<VideoClip> =
            (0..n).map(|i| rand_clip(&mut rng, i as u32, i as u32, t, h, w, c)).collect();
        let bytes = write_archive_bytes(&clips).unwrap();
        let back = read_archive_bytes(&bytes).unwrap();
        prop_assert_eq!(write_archive_bytes(&back).unwrap(), bytes);
    }
}

// ---------------------------------------------------------------------------
// Corruption. Every rejection names the documented error variant.
// ---------------------------------------------------------------------------

#[test]
fn archive_rejects_wrong_magic() {
    let mut bytes = write_archive_bytes(&sample_clips(24, 2)).unwrap();
    bytes[..4].copy_from_slice(b"NOPE");
    match read_archive_bytes(&bytes) {
        Err(Error::BadMagic { expected, found }) => {
            assert_eq!(expected, ARCHIVE_MAGIC);
            assert_eq!(&found, b"NOPE");
        }
        other => panic!("expected BadMagic, got {other:?}"),
    }
}

#[test]
fn archive_rejects_future_version() {
    let mut bytes = write_archive_bytes(&sample_clips(25, 2)).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(read_archive_bytes(&bytes), Err(Error::UnsupportedVersion(99))));
}

#[test]
fn archive_rejects_truncation_and_trailing_bytes() {
    let bytes = write_archive_bytes(&sample_clips(26, 3)).unwrap();
    for cut in [bytes.len() - 1, bytes.len() / 2, 9, 5] {
        assert!(
            matches!(read_archive_bytes(&bytes[..cut]), Err(Error::TruncatedRecord(_))),
            "cut at {cut} was not rejected as truncation"
        );
    }
    let mut padded = bytes.clone();
    padded.extend_from_slice(&[0u8; 3]);
    assert!(matches!(read_archive_bytes(&padded), Err(Error::TrailingData(3))));
}

#[test]
fn archive_rejects_non_finite_pixels() {
    let mut clips = sample_clips(27, 1);
    clips[0].data[5] = f32::NAN;
    // The writer refuses outright; a hand-patched byte stream must fail on read.
    assert!(matches!(write_archive_bytes(&clips), Err(Error::NonFiniteValue(_))));
    clips[0].data[5] = 1.0;
    let mut bytes = write_archive_bytes(&clips).unwrap();
    let header = 12 + 16; // file header + clip header
    let off = header + 5 * 4;
    bytes[off..off + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
    assert!(matches!(read_archive_bytes(&bytes), Err(Error::NonFiniteValue(_))));
}

#[test]
fn checkpoint_rejects_wrong_magic_version_and_truncation() {
    let tensors =
        vec![RawTensor { name: "w".into(), dims: vec![2, 2], data: vec![0.0, 1.0, 2.0, 3.0] }];
    let bytes = write_checkpoint_bytes(&tensors).unwrap();

    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"M3FA");
    match read_checkpoint_bytes(&bad) {
        Err(Error::BadMagic { expected, found }) => {
            assert_eq!(expected, CHECKPOINT_MAGIC);
            assert_eq!(&found, b"M3FA");
        }
        other => panic!("expected BadMagic, got {other:?}"),
    }

    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(read_checkpoint_bytes(&bad), Err(Error::UnsupportedVersion(7))));

    for cut in [bytes.len() - 1, 13, 6, 3] {
        assert!(matches!(read_checkpoint_bytes(&bytes[..cut]), Err(Error::TruncatedRecord(_))));
    }

    let mut padded = bytes;
    padded.push(0);
    assert!(matches!(read_checkpoint_bytes(&padded), Err(Error::TrailingData(1))));
}

#[test]
fn checkpoint_rejects_duplicate_names_and_non_finite_values() {
    let t = RawTensor { name: "dup".into(), dims: vec![1], data: vec![0.5] };
    assert!(matches!(
        write_checkpoint_bytes(&[t.clone(), t.clone()]),
        Err(Error::Checkpoint(_))
    ));

    let bad = RawTensor { name: "w".into(), dims: vec![1], data: vec![f32::NEG_INFINITY] };
    let bytes = write_checkpoint_bytes(&[bad]);
    // The writer does not inspect values; the reader must.
    let bytes = bytes.unwrap();
    assert!(matches!(read_checkpoint_bytes(&bytes), Err(Error::NonFiniteValue(_))));
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    assert!(matches!(TrainConfig::parse("definitely_not_a_key = 3"), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::parse("n_way = banana"), Err(Error::Config(_))));
}

// ---------------------------------------------------------------------------
// Determinism: identical config and seed, identical checkpoint bytes.
// ---------------------------------------------------------------------------

#[test]
fn training_twice_writes_bit_identical_checkpoints() {
    let mut cfg = TrainConfig::default();
    cfg.n_way = 2;
    cfg.k_shot = 1;
    cfg.n_query = 1;
    cfg.frames = 3;
    cfg.patch_grid = 2;
    cfg.d = 8;
    cfg.d_k = 4;
    cfg.d_mlp = 8;
    cfg.learning_rate = 0.01;
    cfg.total_episodes = 40;
    cfg.temperature = 0.5;
    cfg.seed = 99;
    cfg.checkpoint_every = 0;
    cfg.val_every = 0;
    cfg.val_episodes = 0;
    cfg.classes_train = 4;
    cfg.classes_val = 2;
    cfg.classes_test = 2;
    cfg.subactions = 3;
    cfg.subactions_per_class = 2;
    cfg.channels = 3;
    cfg.frame_h = 4;
    cfg.frame_w = 4;
    cfg.clips_per_class = 6;
    cfg.noise_sigma = 0.05;
    cfg.warp_strength = 0.2;

    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> Vec<u8> {
        let source = EpisodeSource::from_config(&cfg).unwrap();
        let path = dir.path().join(name);
        train(&cfg, &source, &path, |_| {}).unwrap();
        std::fs::read(&path).unwrap()
    };
    let first = run("a.m3ck");
    let second = run("b.m3ck");
    assert_eq!(first, second, "same config and seed must reproduce the checkpoint bytes");
}
