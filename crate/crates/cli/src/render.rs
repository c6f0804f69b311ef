//! Bird's-eye-view rendering of a frame: points in gray, ground-truth boxes
//! in green, detections in red. Output is a BMP raster.

use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{Rgb, RgbImage};
use tctr_core::boxes::Detection;
use tctr_core::pillars::{GridConfig, GtBox, PointFrame};

const GT_COLOR: Rgb<u8> = Rgb([0, 220, 0]);
const DET_COLOR: Rgb<u8> = Rgb([255, 40, 40]);

struct View {
    x_min: f32,
    y_max: f32,
    scale_x: f32,
    scale_y: f32,
    px: u32,
}

impl View {
    fn new(grid: &GridConfig, px: u32) -> Self {
        View {
            x_min: grid.x_min,
            y_max: grid.y_max,
            scale_x: (px - 1) as f32 / (grid.x_max - grid.x_min),
            scale_y: (px - 1) as f32 / (grid.y_max - grid.y_min),
            px,
        }
    }

    /// World (x, y) to pixel (col, row); y points up in world space.
    fn to_px(&self, x: f32, y: f32) -> (f32, f32) {
        ((x - self.x_min) * self.scale_x, (self.y_max - y) * self.scale_y)
    }

    fn put(&self, img: &mut RgbImage, col: f32, row: f32, color: Rgb<u8>) {
        let (c, r) = (col.round(), row.round());
        if c >= 0.0 && r >= 0.0 && (c as u32) < self.px && (r as u32) < self.px {
            img.put_pixel(c as u32, r as u32, color);
        }
    }

    fn line(&self, img: &mut RgbImage, a: (f32, f32), b: (f32, f32), color: Rgb<u8>) {
        let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f32 / steps as f32;
            self.put(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), color);
        }
    }

    fn box_outline(&self, img: &mut RgbImage, b: &GtBox, color: Rgb<u8>) {
        let (c, s) = (b.yaw.cos(), b.yaw.sin());
        let corners: Vec<(f32, f32)> = [(1.0, 1.0), (1.0, -1.0), (-1.0, -1.0), (-1.0, 1.0)]
            .iter()
            .map(|(sx, sy)| {
                let (dx, dy) = (sx * b.l / 2.0, sy * b.w / 2.0);
                self.to_px(b.x + c * dx - s * dy, b.y + s * dx + c * dy)
            })
            .collect();
        for i in 0..4 {
            self.line(img, corners[i], corners[(i + 1) % 4], color);
        }
        // Heading tick from the center to the front edge midpoint.
        let center = self.to_px(b.x, b.y);
        let front = self.to_px(b.x + c * b.l / 2.0, b.y + s * b.l / 2.0);
        self.line(img, center, front, color);
    }
}

pub fn render_frame(
    frame: &PointFrame,
    dets: &[Detection],
    grid: &GridConfig,
    px: u32,
) -> Result<RgbImage> {
    if px < 16 {
        bail!("canvas of {px} px is too small to show anything");
    }
    let view = View::new(grid, px);
    let mut img = RgbImage::new(px, px);
    for p in &frame.points {
        let shade = (80.0 + 175.0 * p.r.clamp(0.0, 1.0)) as u8;
        let (c, r) = view.to_px(p.x, p.y);
        view.put(&mut img, c, r, Rgb([shade, shade, shade]));
    }
    for gt in &frame.gt {
        view.box_outline(&mut img, gt, GT_COLOR);
    }
    for det in dets {
        view.box_outline(&mut img, &det.boxp, DET_COLOR);
    }
    Ok(img)
}

pub fn save_bmp(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Bmp)
        .with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tctr_core::pillars::Point;

    fn count_color(img: &RgbImage, color: Rgb<u8>) -> usize {
        img.pixels().filter(|&&p| p == color).count()
    }

    #[test]
    fn empty_frame_renders_black() {
        let img =
            render_frame(&PointFrame::default(), &[], &GridConfig::desk(), 64).unwrap();
        assert_eq!(img.dimensions(), (64, 64));
        assert!(img.pixels().all(|p| *p == Rgb([0, 0, 0])));
    }

    #[test]
    fn layers_show_up_in_their_colors() {
        let frame = PointFrame {
            points: vec![Point { x: 0.0, y: 0.0, z: 0.0, r: 1.0 }],
            gt: vec![GtBox { x: 2.0, y: 2.0, z: 0.0, l: 2.0, w: 1.0, h: 1.0, yaw: 0.3, class_id: 0 }],
        };
        let det = Detection {
            boxp: GtBox { x: -2.0, y: -2.0, z: 0.0, l: 2.0, w: 1.0, h: 1.0, yaw: 0.0, class_id: 0 },
            score: 0.9,
        };
        let img = render_frame(&frame, &[det], &GridConfig::desk(), 256).unwrap();
        assert!(count_color(&img, GT_COLOR) > 10);
        assert!(count_color(&img, DET_COLOR) > 10);
        // World origin: 6.4 / 12.8 * 255 = 127.5, rounds away from zero.
        assert_eq!(*img.get_pixel(128, 128), Rgb([255, 255, 255]));
    }

    #[test]
    fn out_of_range_points_are_clipped_not_panicking() {
        let frame = PointFrame {
            points: vec![Point { x: 100.0, y: -100.0, z: 0.0, r: 0.5 }],
            gt: vec![],
        };
        let img = render_frame(&frame, &[], &GridConfig::desk(), 64).unwrap();
        assert!(img.pixels().all(|p| *p == Rgb([0, 0, 0])));
    }

    #[test]
    fn bmp_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.bmp");
        let frame = PointFrame {
            points: vec![Point { x: 1.0, y: 1.0, z: 0.0, r: 0.8 }],
            gt: vec![],
        };
        let img = render_frame(&frame, &[], &GridConfig::desk(), 64).unwrap();
        save_bmp(&img, &path).unwrap();
        let back = image::open(&path).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (64, 64));
        assert_eq!(back, img);
    }
}
