use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use proto_margin::data::{decode_and_resize, index_image_folder, resize_bilinear, IMAGE_SIZE};

/// Triangle-kernel resampler: each output sample is the tent-weighted sum of
/// the source samples within one pixel of its (half-pixel aligned) position.
fn reference_resize(src: &[f32], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let weights = |o: usize, n: usize, on: usize| -> Vec<(usize, f64)> {
        let s = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        (0..n)
            .map(|i| (i, (1.0 - (s - i as f64).abs()).max(0.0)))
            .filter(|&(_, wt)| wt > 0.0)
            .collect()
    };
    let mut out = Vec::with_capacity(oh * ow * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut acc = 0.0;
                for (y, wy) in weights(oy, h, oh) {
                    for (x, wx) in weights(ox, w, ow) {
                        acc += wy * wx * f64::from(src[(y * w + x) * c + ch]);
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

#[test]
fn checkerboard_downscale_matches_reference() {
    for (h, w) in [(100, 100), (168, 120), (97, 85)] {
        let src: Vec<f32> = (0..h * w * 3)
            .map(|i| {
                let (p, ch) = (i / 3, i % 3);
                let (y, x) = (p / w, p % w);
                if ((y / 3) + (x / 3) + ch) % 2 == 0 { 1.0 } else { 0.0 }
            })
            .collect();
        let got = resize_bilinear(&src, h, w, 3, IMAGE_SIZE, IMAGE_SIZE);
        let want = reference_resize(&src, h, w, 3, IMAGE_SIZE, IMAGE_SIZE);
        let worst = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 255.0, "{h}x{w}: {worst}");
    }
}

#[test]
fn same_size_decode_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.png");
    let img = RgbImage::from_fn(84, 84, |x, y| Rgb([(x * 3) as u8, (y * 3) as u8, ((x + y) % 256) as u8]));
    img.save(&path).unwrap();
    let t = decode_and_resize(&path).unwrap();
    assert_eq!(t.shape(), &[84, 84, 3]);
    for (v, p) in t.data().iter().zip(img.as_raw()) {
        assert_eq!(*v, f32::from(*p) / 255.0);
    }
}

#[test]
fn mid_gray_grayscale_stays_uniform() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    GrayImage::from_pixel(168, 168, Luma([128])).save(&path).unwrap();
    let t = decode_and_resize(&path).unwrap();
    assert_eq!(t.shape(), &[84, 84, 3]);
    assert!(t.data().iter().all(|&v| (v - 0.5).abs() <= 1.0 / 255.0));
}

#[test]
fn corrupt_file_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.png");
    fs::write(&path, b"not a png").unwrap();
    let err = decode_and_resize(&path).unwrap_err();
    assert!(err.to_string().contains("bad.png"), "{err}");
}

fn write_png(path: &Path, shade: u8) {
    RgbImage::from_pixel(10, 12, Rgb([shade, shade / 2, 255 - shade])).save(path).unwrap();
}

#[test]
fn folder_index_counts_labels_and_order() {
    let dir = tempfile::tempdir().unwrap();
    for class in ["polyp", "normal"] {
        fs::create_dir(dir.path().join(class)).unwrap();
        for f in ["c.png", "a.png", "b.png"] {
            write_png(&dir.path().join(class).join(f), 40);
        }
    }
    fs::write(dir.path().join("normal").join("notes.txt"), "ignored").unwrap();
    let idx = index_image_folder(dir.path()).unwrap();
    assert_eq!(idx.len(), 6);
    let labels: Vec<&str> = idx.classes().iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["normal", "polyp"]);
    let names: Vec<String> = idx.classes()[0]
        .examples
        .iter()
        .map(|&e| idx.image_path(e).unwrap().file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["a.png", "b.png", "c.png"]);
    assert_eq!(index_image_folder(dir.path()).unwrap(), idx);
    let batch = idx.load_batch(&[0, 5]).unwrap();
    assert_eq!(batch.shape(), &[2, 84, 84, 3]);
}

#[test]
fn empty_class_and_missing_root_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("full")).unwrap();
    write_png(&dir.path().join("full/x.png"), 9);
    fs::create_dir(dir.path().join("hollow")).unwrap();
    let err = index_image_folder(dir.path()).unwrap_err().to_string();
    assert!(err.contains("empty class") && err.contains("hollow"), "{err}");
    let missing = dir.path().join("nowhere");
    assert!(index_image_folder(&missing).unwrap_err().to_string().contains("nowhere"));
}
