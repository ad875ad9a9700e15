//! Decision-boundary rasters for 2D classifiers.

use std::io::BufWriter;
use std::path::Path;

use causalnl_core::datasets::LabeledDataset;
use causalnl_core::metrics::{decision_lattice, Bounds, BOUNDARY_PADDING};
use causalnl_core::model::Predict;
use causalnl_core::Error as CoreError;

use crate::error::{Error, Result};

const REGION: [[u8; 3]; 6] = [
    [190, 210, 240],
    [245, 200, 180],
    [200, 235, 200],
    [230, 210, 240],
    [250, 235, 180],
    [210, 210, 210],
];
const POINT: [[u8; 3]; 6] = [
    [30, 70, 170],
    [190, 60, 30],
    [30, 130, 50],
    [120, 50, 150],
    [180, 130, 0],
    [60, 60, 60],
];

/// An 8-bit RGB image, row-major from the top-left.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn set(&mut self, row: usize, col: usize, c: [u8; 3]) {
        let i = 3 * (row * self.width + col);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }
}

/// Class regions on a `resolution²` lattice over the padded data bounds,
/// with the dataset points drawn on top.
pub fn boundary_raster(model: &dyn Predict, ds: &LabeledDataset, resolution: usize) -> Result<Raster> {
    if ds.feature_dim() != 2 {
        return Err(CoreError::InvalidArgument("decision boundaries need 2D data".into()).into());
    }
    let bounds = Bounds::padded(ds.instances(), BOUNDARY_PADDING)?;
    let labels = decision_lattice(model, &bounds, resolution)?;
    let mut raster = Raster {
        width: resolution,
        height: resolution,
        rgb: Vec::with_capacity(3 * labels.len()),
    };
    for l in &labels {
        raster.rgb.extend_from_slice(&REGION[l % REGION.len()]);
    }
    let last = resolution.saturating_sub(1) as f64;
    for (p, &label) in ds.instances().rows().zip(ds.labels()) {
        let col = ((p[0] - bounds.min[0]) / (bounds.max[0] - bounds.min[0]) * last).round() as i64;
        let row = ((bounds.max[1] - p[1]) / (bounds.max[1] - bounds.min[1]) * last).round() as i64;
        for (dr, dc) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
            let (r, c) = (row + dr, col + dc);
            if (0..resolution as i64).contains(&r) && (0..resolution as i64).contains(&c) {
                raster.set(r as usize, c as usize, POINT[label % POINT.len()]);
            }
        }
    }
    Ok(raster)
}

pub fn write_png(path: &Path, raster: &Raster) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
    }
    let file = std::fs::File::create(path).map_err(Error::io(path))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), raster.width as u32, raster.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&raster.rgb)?;
    writer.finish()?;
    Ok(())
}

pub fn plot_decision_boundary(model: &dyn Predict, ds: &LabeledDataset, resolution: usize, path: &Path) -> Result<()> {
    write_png(path, &boundary_raster(model, ds, resolution)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use causalnl_core::datasets::generate_moon;
    use causalnl_core::{Error as CoreError, Tensor};

    struct Constant(usize);
    impl Predict for Constant {
        fn predict(&self, x: &Tensor) -> Vec<usize> {
            vec![self.0; x.rows().count()]
        }
    }

    struct SignOfX;
    impl Predict for SignOfX {
        fn predict(&self, x: &Tensor) -> Vec<usize> {
            x.rows().map(|p| usize::from(p[0] > 0.0)).collect()
        }
    }

    fn tiny() -> LabeledDataset {
        LabeledDataset::new(
            "pts",
            Tensor::from_rows(&[[-1.0, -1.0], [1.0, 1.0]]).unwrap(),
            vec![0, 1],
            2,
            None,
        )
        .unwrap()
    }

    #[test]
    fn constant_model_paints_one_region() {
        let ds = generate_moon(50, 0.1, 2).unwrap();
        let r = boundary_raster(&Constant(1), &ds, 40).unwrap();
        let regions = (0..40)
            .flat_map(|row| (0..40).map(move |col| (row, col)))
            .map(|(row, col)| r.pixel(row, col))
            .filter(|p| !POINT.contains(p))
            .collect::<std::collections::BTreeSet<_>>();
        assert_eq!(regions.into_iter().collect::<Vec<_>>(), vec![REGION[1]]);
    }

    #[test]
    fn lattice_halves_follow_the_sign_oracle() {
        let r = boundary_raster(&SignOfX, &tiny(), 21).unwrap();
        assert_eq!(r.pixel(10, 3), REGION[0]);
        assert_eq!(r.pixel(10, 17), REGION[1]);
        let pixels: Vec<_> = r.rgb.chunks(3).collect();
        assert!(pixels.contains(&POINT[0].as_slice()) && pixels.contains(&POINT[1].as_slice()));
    }

    #[test]
    fn png_decodes_to_the_raster() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/b.png");
        let raster = boundary_raster(&SignOfX, &tiny(), 16).unwrap();
        write_png(&path, &raster).unwrap();
        let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&path).unwrap()));
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!((info.width, info.height), (16, 16));
        assert_eq!(&buf[..info.buffer_size()], raster.rgb.as_slice());
    }

    #[test]
    fn non_planar_data_is_rejected() {
        let ds = LabeledDataset::new("3d", Tensor::from_rows(&[[0.0, 1.0, 2.0]]).unwrap(), vec![0], 2, None).unwrap();
        let err = boundary_raster(&Constant(0), &ds, 8).unwrap_err();
        assert!(matches!(err, Error::Core(CoreError::InvalidArgument(_))));
    }
}
