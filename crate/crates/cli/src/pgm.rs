//! Binary greyscale PGM (P5, maxval 255).

use cfnet::ndgrad::Tensor;

/// Values are clipped to [0, 1] and scaled to 0..=255.
pub fn encode(img: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Places equally tall images side by side with a one-pixel white gap.
pub fn hconcat(imgs: &[&Tensor<f32>]) -> Tensor<f32> {
    let h = imgs[0].shape()[0];
    let w: usize = imgs.iter().map(|t| t.shape()[1]).sum::<usize>() + imgs.len() - 1;
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        for (k, t) in imgs.iter().enumerate() {
            if k > 0 {
                data.push(1.0);
            }
            let tw = t.shape()[1];
            data.extend_from_slice(&t.data()[y * tw..(y + 1) * tw]);
        }
    }
    Tensor::new(&[h, w], data).expect("row lengths add up")
}
