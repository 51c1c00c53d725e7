use super::model::FieldModel;
use crate::domain::{DomainSpec, RefractiveIndex};
use crate::xray::{FieldSampler, Support};

/// A field model viewed in physical coordinates.
pub struct ModelSampler<'a> {
    pub model: &'a FieldModel,
    pub spec: &'a DomainSpec,
}

impl<'a> ModelSampler<'a> {
    pub fn new(model: &'a FieldModel, spec: &'a DomainSpec) -> Self {
        ModelSampler { model, spec }
    }
}

impl FieldSampler for ModelSampler<'_> {
    fn sample(&self, x: [f64; 3], t: f64) -> RefractiveIndex {
        if !self.spec.contains(x) {
            return RefractiveIndex::VACUUM;
        }
        let (xn, tn) = self.spec.normalize_unchecked(x, t);
        let o = self.model.eval([xn[0], xn[1], xn[2], tn]);
        self.model.refractive_index(o[0])
    }

    fn support(&self) -> Support {
        Support::Aabb {
            min: self.spec.box_min(),
            max: self.spec.box_max(),
        }
    }
}
