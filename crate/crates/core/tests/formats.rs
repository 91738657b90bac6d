use crowdcount::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use crowdcount::formats::*;
use crowdcount::net::{init_params, NetConfig};
use crowdcount::scene::{DensityMap, GrayImage, Point, PointAnnotations};
use crowdcount::train::TrainConfig;
use crowdcount::Error;
use proptest::prelude::*;

fn image_strategy() -> impl Strategy<Value = GrayImage> {
    (1usize..24, 1usize..24).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.0f64..=1.0, h * w)
            .prop_map(move |px| GrayImage::new(h, w, px).unwrap())
    })
}

fn density_strategy() -> impl Strategy<Value = DensityMap> {
    (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.0f32..1e3, h * w)
            .prop_map(move |v| DensityMap::new(h, w, v.into_iter().map(f64::from).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pgm_round_trip_after_quantization(img in image_strategy()) {
        let q = img.quantized();
        let bytes = encode_pgm(&img);
        prop_assert_eq!(&decode_pgm(&bytes).unwrap(), &q);
        prop_assert_eq!(encode_pgm(&q), bytes);
    }

    #[test]
    fn density_round_trip_is_bit_exact(map in density_strategy()) {
        let back = decode_density(&encode_density(&map)).unwrap();
        prop_assert_eq!(back.height(), map.height());
        let a: Vec<u64> = map.values().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.values().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn annotations_round_trip_exactly(pts in proptest::collection::vec((0.0f64..1e4, 0.0f64..1e4), 0..40)) {
        let ann = PointAnnotations::new(pts.iter().map(|&(x, y)| Point::new(x, y)).collect()).unwrap();
        let back = parse_annotations(&format_annotations(&ann)).unwrap();
        prop_assert_eq!(back, ann);
    }

    #[test]
    fn truncated_density_is_rejected(map in density_strategy(), cut in 1usize..16) {
        let bytes = encode_density(&map);
        let short = &bytes[..bytes.len() - cut.min(bytes.len())];
        let is_format_error = matches!(decode_density(short), Err(Error::Format { .. }));
        prop_assert!(is_format_error);
    }
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let img = GrayImage::from_fn(5, 7, |r, c| ((r * 7 + c) % 11) as f64 / 10.0).unwrap();
    save_image(&img, dir.path().join("a.pgm")).unwrap();
    assert_eq!(load_image(dir.path().join("a.pgm")).unwrap(), img.quantized());

    let ann = PointAnnotations::new(vec![Point::new(1.25, 3.0), Point::new(0.1, 0.2)]).unwrap();
    save_annotations(&ann, dir.path().join("a.json")).unwrap();
    assert_eq!(load_annotations(dir.path().join("a.json")).unwrap(), ann);

    let map = DensityMap::new(2, 3, vec![0.0, 0.5, 1.5, 2.25, 1e-7, 3.0]).unwrap();
    let stored = DensityMap::new(2, 3, map.values().iter().map(|&v| v as f32 as f64).collect()).unwrap();
    save_density(&map, dir.path().join("a.radm")).unwrap();
    assert_eq!(load_density(dir.path().join("a.radm")).unwrap(), stored);
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig { lr: 3.3e-4, seed: 17, epochs: 3, ..TrainConfig::default() };
    cfg.net = NetConfig { two_tower: true, seed: 17, ..NetConfig::default() };
    cfg.net.ra.temperature = 0.123_456_789;
    cfg.bayes.delta = 2.5;
    let params = init_params(&cfg.net).unwrap();
    let path = dir.path().join("m.rack");
    save_checkpoint(&params, &cfg, &path).unwrap();
    let (p2, c2) = load_checkpoint(&path).unwrap();
    assert_eq!(c2, cfg);
    let bits = |p: &crowdcount::net::ModelParams<f32>| {
        p.iter().flat_map(|(k, t)| t.data().iter().map(move |v| (k.clone(), v.to_bits()))).collect::<Vec<_>>()
    };
    assert_eq!(bits(&p2), bits(&params));
    assert_eq!(encode(&p2, &c2).unwrap(), std::fs::read(&path).unwrap());

    let mut bad = std::fs::read(&path).unwrap();
    bad[0] = b'X';
    assert!(matches!(decode(&bad), Err(Error::Format { ref field, .. }) if field == "magic"));
    let good = std::fs::read(&path).unwrap();
    assert!(matches!(decode(&good[..good.len() - 3]), Err(Error::Format { .. })));
}
