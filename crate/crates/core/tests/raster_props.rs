use palmwatch::{load_raster, save_raster, Band, Raster};
use proptest::prelude::*;

fn raster_strategy() -> impl Strategy<Value = Raster> {
    (1usize..=256, 1usize..=256, 1usize..=8, any::<bool>(), -1000i64..1000, -1000i64..1000).prop_flat_map(
        |(w, h, nb, has_nodata, ox, oy)| {
            prop::collection::vec(prop::collection::vec(any::<f32>(), w * h), nb).prop_map(move |bands| {
                let bands = bands
                    .into_iter()
                    .enumerate()
                    .map(|(k, s)| Band::new(format!("b{k}"), (k % 2 == 0).then_some(400.0 + 10.0 * k as f64), s))
                    .collect();
                Raster::new(w, h, bands, has_nodata.then_some(-9999.0), (ox, oy)).unwrap()
            })
        },
    )
}

fn bit_equal(a: &Raster, b: &Raster) -> bool {
    a.width() == b.width()
        && a.height() == b.height()
        && a.origin() == b.origin()
        && a.nodata().map(f32::to_bits) == b.nodata().map(f32::to_bits)
        && a.bands().len() == b.bands().len()
        && a.bands().iter().zip(b.bands()).all(|(x, y)| {
            x.name() == y.name()
                && x.wavelength_nm() == y.wavelength_nm()
                && x.samples().iter().map(|v| v.to_bits()).eq(y.samples().iter().map(|v| v.to_bits()))
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn container_round_trip_is_bit_exact(r in raster_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.rhdr");
        save_raster(&r, &path).unwrap();
        let back = load_raster(&path).unwrap();
        prop_assert!(bit_equal(&r, &back));
        let payload = std::fs::metadata(dir.path().join("r.rbin")).unwrap().len() as usize;
        prop_assert_eq!(payload, 4 * r.len() * r.bands().len());
    }

    #[test]
    fn valid_mask_excludes_nodata_and_non_finite(r in raster_strategy()) {
        let mask = r.valid_mask();
        for (i, &ok) in mask.bits().iter().enumerate() {
            let expected = r.bands().iter().all(|b| b.samples()[i].is_finite() && !r.is_nodata(b.samples()[i]));
            prop_assert_eq!(ok, expected);
        }
    }
}
