use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numcore::tensor::l2_norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Weight,
    Bias,
}

/// One contiguous block of the flat parameter vector.
///
/// Weight segments are `rows x cols` row-major matrices (`rows` = layer
/// output width, `cols` = layer input width); bias segments have `cols == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegmentKind,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Segment table mapping each affine layer to its weight and bias blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    segments: Vec<Segment>,
    total: usize,
}

impl Layout {
    /// Builds the table for consecutive layer widths `[input, hidden.., classes]`.
    pub fn for_widths(widths: &[usize]) -> Self {
        let mut segments = Vec::with_capacity(2 * widths.len().saturating_sub(1));
        let mut offset = 0;
        for (layer, pair) in widths.windows(2).enumerate() {
            let (cols, rows) = (pair[0], pair[1]);
            segments.push(Segment { layer, kind: SegmentKind::Weight, offset, rows, cols });
            offset += rows * cols;
            segments.push(Segment { layer, kind: SegmentKind::Bias, offset, rows, cols: 1 });
            offset += rows;
        }
        Self { segments, total: offset }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn layers(&self) -> usize {
        self.segments.len() / 2
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn weight(&self, layer: usize) -> Segment {
        self.segments[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> Segment {
        self.segments[2 * layer + 1]
    }

    pub fn last_weight(&self) -> Segment {
        self.weight(self.layers() - 1)
    }

    pub fn last_bias(&self) -> Segment {
        self.bias(self.layers() - 1)
    }
}

macro_rules! flat_vector {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            layout: Arc<Layout>,
            values: Vec<f64>,
        }

        impl $name {
            pub fn zeros(layout: Arc<Layout>) -> Self {
                let values = vec![0.0; layout.total()];
                Self { layout, values }
            }

            pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
                if values.len() != layout.total() {
                    return Err(Error::invalid(format!(
                        "layout holds {} values, got {}",
                        layout.total(),
                        values.len()
                    )));
                }
                Ok(Self { layout, values })
            }

            pub fn layout(&self) -> &Arc<Layout> {
                &self.layout
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn into_values(self) -> Vec<f64> {
                self.values
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            pub fn segment(&self, seg: Segment) -> &[f64] {
                &self.values[seg.range()]
            }

            pub fn norm(&self) -> f64 {
                l2_norm(&self.values)
            }

            pub fn same_layout(&self, layout: &Layout) -> bool {
                *self.layout == *layout
            }

            /// `self += scale * other`
            pub fn add_scaled(&mut self, other: &[f64], scale: f64) {
                debug_assert_eq!(self.values.len(), other.len());
                for (a, b) in self.values.iter_mut().zip(other) {
                    *a += scale * b;
                }
            }

            pub fn scale(&mut self, factor: f64) {
                for v in &mut self.values {
                    *v *= factor;
                }
            }
        }
    };
}

flat_vector!(ParamVector);
flat_vector!(GradVector);

impl ParamVector {
    /// Reinterprets parameter-shaped values as a gradient.
    pub fn into_grad(self) -> GradVector {
        GradVector { layout: self.layout, values: self.values }
    }
}

impl GradVector {
    pub fn into_params(self) -> ParamVector {
        ParamVector { layout: self.layout, values: self.values }
    }
}
