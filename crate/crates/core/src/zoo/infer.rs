use super::{Model, Result, ZooError};
use crate::image::Image;
use crate::nn::{Forward, Mode};
use crate::post::{decode, nms, Detection, HeadMaps};
use crate::tensor::{stack, Element, Tape};

impl<T: Element> Model<T> {
    /// Eval-mode forward, decode and class-wise NMS for each image. All
    /// images must share one size.
    pub fn detect(
        &self,
        images: &[&Image],
        conf: f64,
        nms_iou: f64,
    ) -> Result<Vec<Vec<Detection>>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        let size = (first.width, first.height);
        if images.iter().any(|im| (im.width, im.height) != size) {
            return Err(ZooError::Config(
                "images in one batch must share a size".into(),
            ));
        }
        let batch = stack(
            &images
                .iter()
                .map(|im| im.to_tensor::<T>())
                .collect::<Vec<_>>(),
        )?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let outs = {
            let mut f = Forward::new(&mut tape, &self.store, Mode::Eval).track_grads(false);
            self.forward(&mut f, x)?
        };
        let maps: Vec<HeadMaps<T>> = outs
            .iter()
            .map(|o| {
                let cls = tape.value(o.cls).clone();
                let stride = size.0 / cls.shape().w;
                HeadMaps {
                    cls,
                    box_dist: tape.value(o.box_dist).clone(),
                    stride,
                }
            })
            .collect();
        (0..images.len())
            .map(|i| Ok(nms(&decode(&maps, i, size, conf)?, nms_iou)))
            .collect()
    }
}
