use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::ImageShape;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Fully connected layer, `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `m x n` (outputs by inputs)
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape("DenseLayer", weights.shape(), (bias.len(), 1)));
        }
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite {
                context: "dense layer parameters".into(),
            });
        }
        Ok(DenseLayer { weights, bias })
    }

    /// Gaussian weights with standard deviation `1/√n`, zero bias.
    pub fn init<R: Rng + ?Sized>(outputs: usize, inputs: usize, rng: &mut R) -> Self {
        let mut weights = Matrix::gaussian(outputs, inputs, rng);
        weights.scale_in_place(1.0 / (inputs as f64).sqrt());
        DenseLayer {
            weights,
            bias: vec![0.0; outputs],
        }
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }
}

/// 2-D convolution over channel-major images.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `out_channels x (in_channels · kh · kw)`, one flattened kernel per row.
    pub kernels: Matrix,
    pub bias: Vec<f64>,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kernels: Matrix,
        bias: Vec<f64>,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernels.cols() != in_channels * kernel_h * kernel_w || bias.len() != kernels.rows() {
            return Err(Error::shape(
                "ConvLayer",
                kernels.shape(),
                (bias.len(), in_channels * kernel_h * kernel_w),
            ));
        }
        if stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::Config("convolution needs non-zero stride and kernel size".into()));
        }
        if !kernels.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite {
                context: "convolution parameters".into(),
            });
        }
        Ok(ConvLayer {
            kernels,
            bias,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        })
    }

    /// Gaussian kernels with standard deviation `1/√fan_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let kernels = Matrix::from_fn(out_channels, fan_in, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
        ConvLayer {
            kernels,
            bias: vec![0.0; out_channels],
            in_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.rows()
    }

    pub fn output_shape(&self, input: ImageShape) -> Result<ImageShape> {
        let (ph, pw) = (input.height + 2 * self.padding, input.width + 2 * self.padding);
        if input.channels != self.in_channels || ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::Config(format!(
                "convolution with {} input channels and {}x{} kernel cannot take {input:?}",
                self.in_channels, self.kernel_h, self.kernel_w
            )));
        }
        Ok(ImageShape {
            channels: self.out_channels(),
            height: (ph - self.kernel_h) / self.stride + 1,
            width: (pw - self.kernel_w) / self.stride + 1,
        })
    }

    /// Unfolds one image into a `(c · kh · kw) x (oh · ow)` patch matrix.
    pub(crate) fn im2col(&self, image: &[f64], input: ImageShape, output: ImageShape) -> Matrix {
        let (kh, kw, s, pad) = (self.kernel_h, self.kernel_w, self.stride, self.padding as isize);
        let positions = output.height * output.width;
        let mut cols = Matrix::zeros(input.channels * kh * kw, positions);
        let data = cols.as_mut_slice();
        for c in 0..input.channels {
            let plane = &image[c * input.height * input.width..(c + 1) * input.height * input.width];
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = (c * kh + dy) * kw + dx;
                    let out = &mut data[row * positions..(row + 1) * positions];
                    for oy in 0..output.height {
                        let iy = (oy * s + dy) as isize - pad;
                        if iy < 0 || iy >= input.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * input.width..(iy as usize + 1) * input.width];
                        for ox in 0..output.width {
                            let ix = (ox * s + dx) as isize - pad;
                            if ix >= 0 && ix < input.width as isize {
                                out[oy * output.width + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Folds patch gradients back onto the image, accumulating overlaps.
    pub(crate) fn col2im(&self, cols: &Matrix, input: ImageShape, output: ImageShape, image: &mut [f64]) {
        let (kh, kw, s, pad) = (self.kernel_h, self.kernel_w, self.stride, self.padding as isize);
        let positions = output.height * output.width;
        let data = cols.as_slice();
        for c in 0..input.channels {
            let plane = &mut image[c * input.height * input.width..(c + 1) * input.height * input.width];
            for dy in 0..kh {
                for dx in 0..kw {
                    let row = (c * kh + dy) * kw + dx;
                    let src = &data[row * positions..(row + 1) * positions];
                    for oy in 0..output.height {
                        let iy = (oy * s + dy) as isize - pad;
                        if iy < 0 || iy >= input.height as isize {
                            continue;
                        }
                        for ox in 0..output.width {
                            let ix = (ox * s + dx) as isize - pad;
                            if ix >= 0 && ix < input.width as isize {
                                plane[iy as usize * input.width + ix as usize] += src[oy * output.width + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Feature layout flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Features {
    Image(ImageShape),
    Flat(usize),
}

impl Features {
    pub fn len(&self) -> usize {
        match self {
            Features::Image(s) => s.len(),
            Features::Flat(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
    /// 2x2 max pooling with stride 2.
    MaxPool2,
    Relu,
    /// Inverted dropout at the network's dropout fraction; identity in eval
    /// mode.
    Dropout,
}

impl Layer {
    pub(crate) fn output_features(&self, input: Features) -> Result<Features> {
        match (self, input) {
            (Layer::Dense(d), f) => {
                if f.len() != d.inputs() {
                    return Err(Error::Config(format!(
                        "dense layer expects {} inputs, previous layer gives {}",
                        d.inputs(),
                        f.len()
                    )));
                }
                Ok(Features::Flat(d.outputs()))
            }
            (Layer::Conv(c), Features::Image(s)) => Ok(Features::Image(c.output_shape(s)?)),
            (Layer::Conv(_), Features::Flat(_)) => Err(Error::Config("convolution needs image-shaped input".into())),
            (Layer::MaxPool2, Features::Image(s)) => {
                if s.height % 2 != 0 || s.width % 2 != 0 {
                    return Err(Error::Config(format!("2x2 pooling needs even spatial dims, got {s:?}")));
                }
                Ok(Features::Image(ImageShape {
                    channels: s.channels,
                    height: s.height / 2,
                    width: s.width / 2,
                }))
            }
            (Layer::MaxPool2, Features::Flat(_)) => Err(Error::Config("pooling needs image-shaped input".into())),
            (Layer::Relu | Layer::Dropout, f) => Ok(f),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weights.len() + d.bias.len(),
            Layer::Conv(c) => c.kernels.len() + c.bias.len(),
            _ => 0,
        }
    }
}
