use serde::{Deserialize, Serialize};

use crate::datagen::{InstanceLabelMap, RgbImage};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, image_metrics, ImageMetrics, MetricsReport};
use crate::model::{image_to_input, Model, MASK_SIZE};
use crate::pseudolabel::{paste_instances, RawInstance};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Grid;

use super::data::Sample;
use super::HeadFlags;

/// Which mask head(s) produce the final per-instance probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSource {
    Nmh,
    Lrd,
    /// Mean of the naive probabilities and the upsampled low-res ones.
    Fused,
}

impl MaskSource {
    pub fn for_heads(h: HeadFlags) -> Self {
        match (h.nmh, h.lrd) {
            (true, true) => MaskSource::Fused,
            (false, true) => MaskSource::Lrd,
            _ => MaskSource::Nmh,
        }
    }
}

fn probs<T: Scalar>(g: &Grid<T>) -> Grid<f64> {
    Grid::from_vec(g.height, g.width, g.data.iter().map(|&v| sigmoid(v).as_f64()).collect())
}

/// Per-detection 28x28 probabilities from the chosen head(s).
pub fn predict_instances<T: Scalar>(model: &Model<T>, image: &RgbImage, source: MaskSource) -> Result<Vec<RawInstance>> {
    let (features, _) = model.backbone_forward(&image_to_input(image))?;
    let dets = model.detect(&features, (image.height, image.width));
    let mut out = Vec::with_capacity(dets.len());
    for (id, det) in dets.iter().enumerate() {
        let roi = match model.roi_align(&features, det, id) {
            Ok(r) => r,
            Err(Error::DegenerateBox(_)) => continue,
            Err(e) => return Err(e),
        };
        let hi = || probs(&model.nmh_forward(&roi.values).0);
        let lo = || probs(&model.lrd_forward(&roi.values).0).resize(MASK_SIZE, MASK_SIZE);
        let p = match source {
            MaskSource::Nmh => hi(),
            MaskSource::Lrd => lo(),
            MaskSource::Fused => {
                let (a, b) = (hi(), lo());
                Grid::from_vec(MASK_SIZE, MASK_SIZE, a.data.iter().zip(&b.data).map(|(x, y)| 0.5 * (x + y)).collect())
            }
        };
        out.push(RawInstance {
            detection: *det,
            probs: p,
        });
    }
    Ok(out)
}

/// Instance map for one image: detections scoring at least `t_box`, pasted
/// at `t_pix`.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    image: &RgbImage,
    source: MaskSource,
    t_box: f64,
    t_pix: f64,
) -> Result<InstanceLabelMap> {
    let kept: Vec<RawInstance> = predict_instances(model, image, source)?
        .into_iter()
        .filter(|r| r.detection.score >= t_box)
        .collect();
    Ok(paste_instances(image.height, image.width, &kept, t_pix))
}

pub fn evaluate_images<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    source: MaskSource,
    t_box: f64,
    t_pix: f64,
) -> Result<Vec<ImageMetrics>> {
    samples
        .iter()
        .map(|s| image_metrics(&predict(model, &s.image, source, t_box, t_pix)?, &s.labels))
        .collect()
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample],
    source: MaskSource,
    t_box: f64,
    t_pix: f64,
) -> Result<MetricsReport> {
    Ok(aggregate(&evaluate_images(model, samples, source, t_box, t_pix)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn mask_source_follows_heads() {
        assert_eq!(MaskSource::for_heads(HeadFlags::ALL), MaskSource::Fused);
        assert_eq!(MaskSource::for_heads(HeadFlags::NMH), MaskSource::Nmh);
        let lrd: HeadFlags = "lrd+crc".parse().unwrap();
        assert_eq!(MaskSource::for_heads(lrd), MaskSource::Lrd);
    }

    #[test]
    fn prediction_has_image_shape() {
        let m = Model::<f32>::new(ModelConfig::default(), 3);
        let img = RgbImage::filled(32, 48, [0.8, 0.6, 0.7]);
        let p = predict(&m, &img, MaskSource::Fused, 0.0, 0.5).unwrap();
        assert_eq!((p.height, p.width), (32, 48));
    }
}
