use super::{ConvSpec, Dims, FcSpec, Layer, LayerSpec, NormSpec, PoolSpec, Topology};

fn conv(c: usize, k: usize, r: usize, stride: usize, pad: usize, groups: usize) -> LayerSpec {
    LayerSpec::Conv(ConvSpec {
        in_channels: c,
        out_channels: k,
        kernel_h: r,
        kernel_w: r,
        stride,
        pad,
        groups,
        relu: false,
    })
}

fn fc(n_in: usize, n_out: usize) -> LayerSpec {
    LayerSpec::FullyConnected(FcSpec {
        n_in,
        n_out,
        relu: false,
    })
}

const POOL: LayerSpec = LayerSpec::MaxPool(PoolSpec {
    window: 3,
    stride: 2,
});

/// AlexNet with a 3x227x227 input (21 layers including ReLU, LRN, pooling
/// and the final softmax).
pub fn builtin_alexnet() -> Topology {
    let norm = LayerSpec::Norm(NormSpec::ALEXNET);
    let layers = vec![
        Layer::new("conv1", conv(3, 96, 11, 4, 0, 1)),
        Layer::new("relu1", LayerSpec::Relu),
        Layer::new("norm1", norm),
        Layer::new("pool1", POOL),
        Layer::new("conv2", conv(96, 256, 5, 1, 2, 2)),
        Layer::new("relu2", LayerSpec::Relu),
        Layer::new("norm2", norm),
        Layer::new("pool2", POOL),
        Layer::new("conv3", conv(256, 384, 3, 1, 1, 1)),
        Layer::new("relu3", LayerSpec::Relu),
        Layer::new("conv4", conv(384, 384, 3, 1, 1, 2)),
        Layer::new("relu4", LayerSpec::Relu),
        Layer::new("conv5", conv(384, 256, 3, 1, 1, 2)),
        Layer::new("relu5", LayerSpec::Relu),
        Layer::new("pool5", POOL),
        Layer::new("fc6", fc(9216, 4096)),
        Layer::new("relu6", LayerSpec::Relu),
        Layer::new("fc7", fc(4096, 4096)),
        Layer::new("relu7", LayerSpec::Relu),
        Layer::new("fc8", fc(4096, 1000)),
        Layer::new("prob", LayerSpec::Softmax),
    ];
    let mut t = Topology::new("alexnet", Dims::new(3, 227, 227), layers)
        .expect("built-in AlexNet is well formed");
    t.description = Some(
        "AlexNet. The input is 3x227x227, which gives the canonical 55x55 conv1 output; \
         224x224 is the GPU benchmark convention for the same network."
            .into(),
    );
    t
}
