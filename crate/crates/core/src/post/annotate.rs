use super::Detection;
use crate::image::Image;

/// Box colors, indexed by class id modulo the length.
pub const PALETTE: [[u8; 3]; 8] = [
    [255, 56, 56],
    [72, 249, 10],
    [0, 148, 255],
    [255, 178, 29],
    [207, 210, 49],
    [146, 204, 23],
    [255, 55, 199],
    [0, 194, 255],
];

pub fn palette_color(class_id: usize) -> [u8; 3] {
    PALETTE[class_id % PALETTE.len()]
}

/// Draws each box as a 1-px outline into a copy of `image`, skipping
/// pixels outside the frame. Labels are returned as lines suitable for
/// the PPM header rather than rasterized, so only outline pixels change.
pub fn annotate(image: &Image, dets: &[Detection]) -> (Image, Vec<String>) {
    let mut out = image.clone();
    let mut labels = Vec::with_capacity(dets.len());
    let (w, h) = (image.width as i64, image.height as i64);
    for d in dets {
        let color = palette_color(d.class_id);
        let x1 = d.bbox.x1.round() as i64;
        let y1 = d.bbox.y1.round() as i64;
        let x2 = (d.bbox.x2.round() as i64 - 1).max(x1);
        let y2 = (d.bbox.y2.round() as i64 - 1).max(y1);
        let mut put = |x: i64, y: i64| {
            if (0..w).contains(&x) && (0..h).contains(&y) {
                out.set(x as usize, y as usize, color);
            }
        };
        for x in x1..=x2 {
            put(x, y1);
            put(x, y2);
        }
        for y in y1..=y2 {
            put(x1, y);
            put(x2, y);
        }
        labels.push(format!(
            "class={} score={:.3} box={:.1},{:.1},{:.1},{:.1}",
            d.class_id, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
        ));
    }
    (out, labels)
}
