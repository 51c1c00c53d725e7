use std::path::Path;
use std::sync::Arc;

use crate::container::{self, ContainerManifest, Dtype, FORMAT_TAG};
use crate::domain::{DomainSpec, FlowState, ScalarField3};
use crate::error::{Error, Result};

pub const FIELD_NAMES: [&str; 5] = ["psi", "u_x", "u_y", "u_z", "p"];

/// Time-ordered sequence of flow states on one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Movie4D {
    pub spec: Arc<DomainSpec>,
    pub frames: Vec<FlowState>,
    /// Position of each frame in the full-domain frame sequence.
    pub frame_indices: Vec<usize>,
    /// Seconds between consecutive frames.
    pub dt_frame: f64,
}

impl Movie4D {
    pub fn new(spec: Arc<DomainSpec>, frames: Vec<FlowState>, frame_indices: Vec<usize>) -> Result<Self> {
        if frames.is_empty() || frames.len() != frame_indices.len() {
            return Err(Error::Shape("a movie needs one index per frame and at least one frame".into()));
        }
        if frames.iter().any(|f| *f.spec != *spec) {
            return Err(Error::Shape("every frame must share the movie domain".into()));
        }
        let dt_frame = if frames.len() > 1 {
            frames[1].t - frames[0].t
        } else {
            spec.frame_interval()
        };
        for w in frames.windows(2) {
            let d = w[1].t - w[0].t;
            if !(d > 0.0) || ((d - dt_frame) / dt_frame).abs() > 1e-9 {
                return Err(Error::Shape("frame timestamps must increase uniformly".into()));
            }
        }
        Ok(Movie4D {
            spec,
            frames,
            frame_indices,
            dt_frame,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.t).collect()
    }

    pub fn duration(&self) -> f64 {
        self.frames.last().unwrap().t - self.frames[0].t
    }

    /// Every `stride`-th frame starting with the first.
    pub fn subsample(&self, stride: usize) -> Result<Movie4D> {
        if stride == 0 {
            return Err(Error::Usage("stride must be positive".into()));
        }
        let frames: Vec<FlowState> = self.frames.iter().step_by(stride).cloned().collect();
        let idx = self.frame_indices.iter().step_by(stride).copied().collect();
        Movie4D::new(self.spec.clone(), frames, idx)
    }

    /// First `count` frames.
    pub fn truncate(&self, count: usize) -> Result<Movie4D> {
        let count = count.min(self.len());
        Movie4D::new(
            self.spec.clone(),
            self.frames[..count].to_vec(),
            self.frame_indices[..count].to_vec(),
        )
    }

    pub fn manifest(&self, dtype: Dtype) -> ContainerManifest {
        ContainerManifest {
            format: FORMAT_TAG.into(),
            dims: self.spec.grid_shape,
            extents: self.spec.extent,
            time_span: self.spec.time_span,
            domain_frame_count: self.spec.frame_count,
            dtype,
            fields: FIELD_NAMES.iter().map(|s| s.to_string()).collect(),
            frame_times: self.times(),
            frame_indices: self.frame_indices.clone(),
        }
    }

    pub fn save(&self, dir: &Path, dtype: Dtype) -> Result<()> {
        let frames: Vec<Vec<&ScalarField3>> = self
            .frames
            .iter()
            .map(|f| vec![&f.psi, &f.u[0], &f.u[1], &f.u[2], &f.p])
            .collect();
        container::write_container(dir, &self.manifest(dtype), &frames)
    }

    pub fn load(dir: &Path) -> Result<Movie4D> {
        let m = container::read_manifest(dir)?;
        for name in FIELD_NAMES {
            if !m.fields.iter().any(|f| f == name) {
                return Err(Error::format(dir.join(container::MANIFEST), format!("missing field {name}")));
            }
        }
        let spec = Arc::new(m.domain());
        let mut frames = Vec::with_capacity(m.frame_count());
        for (f, &t) in m.frame_times.iter().enumerate() {
            let read = |name: &str| container::read_field(dir, &m, name, f);
            frames.push(FlowState::new(
                spec.clone(),
                read("psi")?,
                [read("u_x")?, read("u_y")?, read("u_z")?],
                read("p")?,
                t,
            )?);
        }
        Movie4D::new(spec, frames, m.frame_indices.clone())
    }
}
