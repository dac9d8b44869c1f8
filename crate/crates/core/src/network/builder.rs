use crate::autodiff::{BnMode, Graph, NodeId};
use crate::error::Result;
use crate::tensor::Shape;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    KaimingUniform {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
    /// Running statistics are state, not trainable parameters.
    pub buffer: bool,
}

/// Appends named layers to a [`Graph`] and records every parameter it declares.
pub struct Builder<'g> {
    pub graph: &'g mut Graph,
    pub mode: BnMode,
    pub specs: Vec<ParamSpec>,
    /// Train-mode batchnorm nodes with the layer name they belong to.
    pub bn_nodes: Vec<(String, NodeId)>,
}

impl<'g> Builder<'g> {
    pub fn new(graph: &'g mut Graph, mode: BnMode) -> Self {
        Builder {
            graph,
            mode,
            specs: Vec::new(),
            bn_nodes: Vec::new(),
        }
    }

    fn declare(&mut self, name: String, shape: Shape, init: Init, buffer: bool) -> Result<NodeId> {
        let id = self.graph.leaf(&name, shape, !buffer)?;
        if !self.specs.iter().any(|s| s.name == name) {
            self.specs.push(ParamSpec {
                name,
                shape,
                init,
                buffer,
            });
        }
        Ok(id)
    }

    pub fn conv(
        &mut self,
        name: &str,
        x: NodeId,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Result<NodeId> {
        let cin = self.graph.shape(x).c();
        let w = self.declare(
            format!("{name}.weight"),
            Shape::new(cout, cin, k, k),
            Init::KaimingUniform {
                fan_in: cin * k * k,
            },
            false,
        )?;
        let b = if bias {
            Some(self.declare(
                format!("{name}.bias"),
                Shape::new(1, cout, 1, 1),
                Init::Zeros,
                false,
            )?)
        } else {
            None
        };
        self.graph.conv2d(x, w, b, stride, pad)
    }

    pub fn bn(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let ps = Shape::new(1, self.graph.shape(x).c(), 1, 1);
        let gamma = self.declare(format!("{name}.gamma"), ps, Init::Ones, false)?;
        let beta = self.declare(format!("{name}.beta"), ps, Init::Zeros, false)?;
        let rm_name = format!("{name}.running_mean");
        let rv_name = format!("{name}.running_var");
        match self.mode {
            BnMode::Train => {
                // Declared for the init pass but never wired into a train graph.
                if !self.specs.iter().any(|s| s.name == rm_name) {
                    self.specs.push(ParamSpec {
                        name: rm_name,
                        shape: ps,
                        init: Init::Zeros,
                        buffer: true,
                    });
                    self.specs.push(ParamSpec {
                        name: rv_name,
                        shape: ps,
                        init: Init::Ones,
                        buffer: true,
                    });
                }
                let y = self.graph.batchnorm2d(x, gamma, beta, None, BN_EPS)?;
                self.bn_nodes.push((name.to_string(), y));
                Ok(y)
            }
            BnMode::Eval => {
                let rm = self.declare(rm_name, ps, Init::Zeros, true)?;
                let rv = self.declare(rv_name, ps, Init::Ones, true)?;
                self.graph
                    .batchnorm2d(x, gamma, beta, Some((rm, rv)), BN_EPS)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_bn_relu(
        &mut self,
        name: &str,
        x: NodeId,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let y = self.conv(&format!("{name}.conv"), x, cout, k, stride, pad, false)?;
        let y = self.bn(&format!("{name}.bn"), y)?;
        Ok(self.graph.relu(y))
    }

    pub fn fc(&mut self, name: &str, x: NodeId, out: usize) -> Result<NodeId> {
        let xs = self.graph.shape(x);
        let features = xs.c() * xs.h() * xs.w();
        let w = self.declare(
            format!("{name}.weight"),
            Shape::new(out, features, 1, 1),
            Init::KaimingUniform { fan_in: features },
            false,
        )?;
        let b = self.declare(
            format!("{name}.bias"),
            Shape::new(1, out, 1, 1),
            Init::Zeros,
            false,
        )?;
        self.graph.fully_connected(x, w, Some(b))
    }

    /// 1x1 convolution with bias followed by a sigmoid.
    pub fn head(&mut self, name: &str, x: NodeId, cout: usize) -> Result<NodeId> {
        let y = self.conv(name, x, cout, 1, 1, 0, true)?;
        Ok(self.graph.sigmoid(y))
    }
}
