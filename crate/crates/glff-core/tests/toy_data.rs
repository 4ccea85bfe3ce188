//! The checked-in toy dataset: 16 procedurally generated "real" images
//! (smooth shading) and 16 "fake" images (the same shading plus pixel-grid
//! artifacts), 96x96. `regenerate_toy_dataset` rewrites the files from the
//! seeded generators; run it explicitly if the fixtures ever need to change.

mod common;

use glff_core::image::ImageTensor;

#[test]
#[ignore = "rewrites the checked-in fixtures"]
fn regenerate_toy_dataset() {
    common::write_toy_dataset().expect("regeneration succeeds");
}

#[test]
fn toy_dataset_is_present_and_matches_generators() {
    for i in 0..16u64 {
        let real_path = common::toy_real_dir().join(format!("real_{i:02}.png"));
        let fake_path = common::toy_fake_dir().join(format!("fake_{i:02}.png"));
        let real = ImageTensor::load(&real_path).expect("checked-in real image");
        let fake = ImageTensor::load(&fake_path).expect("checked-in fake image");
        assert_eq!(real.pixels.dim(), (96, 96, 3));
        assert_eq!(fake.pixels.dim(), (96, 96, 3));
        // files reproduce the seeded generators exactly (after the u8
        // quantization that PNG storage implies)
        let regen_real = ImageTensor::from_rgb8(&common::synth_real(i, 96).to_rgb8());
        let regen_fake = ImageTensor::from_rgb8(&common::synth_fake(i, 96).to_rgb8());
        assert_eq!(real.pixels, regen_real.pixels, "real_{i:02} drifted");
        assert_eq!(fake.pixels, regen_fake.pixels, "fake_{i:02} drifted");
    }
    let texture = ImageTensor::load(&common::texture_image_path()).expect("texture image");
    assert_eq!(texture.pixels.dim(), (96, 96, 3));
    // fakes carry far more high-frequency energy than reals
    let lap_real = glff_core::image::laplacian_variance(
        &ImageTensor::load(&common::toy_real_dir().join("real_00.png"))
            .unwrap()
            .pixels,
    );
    let lap_fake = glff_core::image::laplacian_variance(
        &ImageTensor::load(&common::toy_fake_dir().join("fake_00.png"))
            .unwrap()
            .pixels,
    );
    assert!(lap_fake > 10.0 * lap_real, "{lap_fake} vs {lap_real}");
}
