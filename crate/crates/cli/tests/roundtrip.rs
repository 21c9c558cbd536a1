use proptest::collection::vec;
use proptest::prelude::*;
use rwprop_cli::formats::{FieldFile, GrayImage, LabelEntry, LabelsFile};

fn field() -> impl Strategy<Value = FieldFile> {
    (1u32..6, 1u32..6, 1u32..4).prop_flat_map(|(w, h, c)| {
        vec(any::<u32>().prop_map(f32::from_bits), (w * h * c) as usize)
            .prop_map(move |data| FieldFile::new(w, h, c, data).unwrap())
    })
}

fn labels_file() -> impl Strategy<Value = LabelsFile> {
    (1i64..8, 1i64..8, 1i64..5).prop_flat_map(|(w, h, k)| {
        proptest::sample::subsequence((0..w * h).collect::<Vec<_>>(), 0..=(w * h) as usize)
            .prop_flat_map(move |pixels| {
                let n = pixels.len();
                (Just(pixels), vec(0..k, n)).prop_map(move |(pixels, classes)| LabelsFile {
                    width: w,
                    height: h,
                    num_classes: k,
                    entries: pixels
                        .iter()
                        .zip(classes)
                        .map(|(&p, class)| LabelEntry { x: p % w, y: p / w, class })
                        .collect(),
                })
            })
    })
}

proptest! {
    #[test]
    fn field_roundtrip_is_bitwise(f in field()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.rwf");
        f.write(&path).unwrap();
        let back = FieldFile::read(&path).unwrap();
        prop_assert_eq!((back.width, back.height, back.channels), (f.width, f.height, f.channels));
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back.data), bits(&f.data));
    }

    #[test]
    fn truncated_fields_are_rejected(f in field(), cut in 1usize..8) {
        let bytes = f.to_bytes();
        let cut = cut.min(bytes.len());
        prop_assert!(FieldFile::from_bytes(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn labels_roundtrip(l in labels_file()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.json");
        l.write(&path).unwrap();
        let back = LabelsFile::read(&path).unwrap();
        prop_assert_eq!(&back, &l);
        let (lattice, sparse) = back.to_labels().unwrap();
        let mut sorted = l.clone();
        sorted.entries.sort_by_key(|e| e.y * l.width + e.x);
        prop_assert_eq!(LabelsFile::from_labels(&lattice, &sparse), sorted);
    }

    #[test]
    fn pgm_roundtrip(w in 1usize..20, h in 1usize..20, seed in any::<u8>()) {
        let img = GrayImage {
            width: w,
            height: h,
            pixels: (0..w * h).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect(),
        };
        prop_assert_eq!(GrayImage::from_pgm(&img.to_pgm()).unwrap(), img);
    }
}
