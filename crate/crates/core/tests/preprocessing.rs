mod support;

use proptest::prelude::*;
use sanet::preproc::{buffered_crop, mask_other_experts, BoundingBox, CropConfig, RawFrame};

#[test]
fn crop_matches_integer_oracle_on_grid() {
    support::crop_grid().unwrap();
}

#[test]
fn masking_matches_pixel_oracle() {
    support::masking(1000, 17).unwrap();
}

fn arb_box(w: u32, h: u32) -> impl Strategy<Value = BoundingBox> {
    (0..w - 1, 0..h - 1).prop_flat_map(move |(x1, y1)| {
        (Just(x1), Just(y1), x1 + 1..w, y1 + 1..h).prop_map(|(x1, y1, x2, y2)| BoundingBox { x1, y1, x2, y2 })
    })
}

fn frame(w: usize, h: usize, seed: u8) -> RawFrame {
    let rgb = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
    let depth = (0..w * h).map(|i| if i % 17 == 0 { f32::NAN } else { i as f32 * 0.01 + seed as f32 }).collect();
    RawFrame::new(w, h, rgb, depth, 0).unwrap()
}

proptest! {
    #[test]
    fn crop_stays_in_frame_and_encloses(b in arb_box(200, 120), r in 1.0f64..2.0, c in 0.0f64..30.0) {
        let cfg = CropConfig { r, c_min: c, ..CropConfig::default() };
        let out = buffered_crop(&b, &cfg, (200, 120));
        prop_assert!(out.x2 < 200 && out.y2 < 120);
        prop_assert!(out.encloses(&b));
        prop_assert!(out.width() >= b.width() && out.height() >= b.height());
    }

    #[test]
    fn identity_crop_is_identity(b in arb_box(64, 48)) {
        let cfg = CropConfig { r: 1.0, c_min: 0.0, ..CropConfig::default() };
        prop_assert_eq!(buffered_crop(&b, &cfg, (64, 48)), b);
    }

    #[test]
    fn masking_keeps_target_and_is_idempotent(
        boxes in proptest::collection::vec(arb_box(40, 30), 1..5),
        pick in any::<prop::sample::Index>(),
    ) {
        let f = frame(40, 30, 1);
        let bg = frame(40, 30, 99);
        let tagged: Vec<(u32, BoundingBox)> = boxes.iter().enumerate().map(|(i, b)| (i as u32, *b)).collect();
        let keep = pick.index(tagged.len()) as u32;
        let kb = tagged[keep as usize].1;
        let out = mask_other_experts(&f, &tagged, keep, &bg).unwrap();
        for y in kb.y1..=kb.y2 {
            for x in kb.x1..=kb.x2 {
                let i = (y * 40 + x) as usize;
                prop_assert_eq!(&out.rgb[i * 3..i * 3 + 3], &f.rgb[i * 3..i * 3 + 3]);
                prop_assert_eq!(out.depth[i].to_bits(), f.depth[i].to_bits());
            }
        }
        let again = mask_other_experts(&out, &tagged, keep, &bg).unwrap();
        prop_assert_eq!(&again.rgb, &out.rgb);
        prop_assert!(again.depth.iter().zip(&out.depth).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
