#![allow(dead_code)]

use rand::Rng;
use scop::data::checkpoint::decode_checkpoint;
use scop::data::cifar::parse_cifar_records;
use scop::data::idx::{parse_idx_images, parse_idx_labels};
use scop::data::{Dataset, Split};
use scop::knockoff::{decode_knockoff_cache, encode_knockoff_cache};
use scop::nn::{build_arch, Layer, Network};
use scop::pipeline::{decode_network, encode_network};
use scop::rng::stream;
use scop::Tensor;

/// Parameter and MAC totals by walking every weight entry and every output
/// position one at a time.
pub fn naive_counts(net: &Network) -> (u64, u64) {
    let mut params = 0u64;
    let mut macs = 0u64;
    let mut shape = net.input_shape.clone();
    let conv_macs = |w: &Tensor, stride: usize, pad: usize, shape: &[usize]| -> (u64, Vec<usize>) {
        let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        let (h, wd) = (shape[1], shape[2]);
        let mut n = 0u64;
        let mut oh = 0;
        let mut ow = 0;
        let mut y = 0;
        while y + k <= h + 2 * pad {
            oh += 1;
            let mut x = 0;
            ow = 0;
            while x + k <= wd + 2 * pad {
                ow += 1;
                for _ in 0..co * ci * k * k {
                    n += 1;
                }
                x += stride;
            }
            y += stride;
        }
        (n, vec![co, oh, ow])
    };
    let mut outputs: Vec<Vec<usize>> = Vec::new();
    for layer in &net.layers {
        match layer {
            Layer::Conv(c) => {
                params += c.weight.data().len() as u64;
                params += c.bias.as_ref().map_or(0, |b| b.data().len() as u64);
                let (n, out) = conv_macs(&c.weight, c.stride, c.padding, &shape);
                macs += n;
                shape = out;
            }
            Layer::BatchNorm(b) => params += (b.gamma.data().len() + b.beta.data().len()) as u64,
            Layer::Activation(_) => {}
            Layer::MaxPool { kernel, stride } | Layer::AvgPool { kernel, stride } => {
                shape = vec![shape[0], (shape[1] - kernel) / stride + 1, (shape[2] - kernel) / stride + 1];
            }
            Layer::Flatten => shape = vec![shape.iter().product()],
            Layer::Linear(l) => {
                let (o, i) = (l.weight.shape()[0], l.weight.shape()[1]);
                for _ in 0..o {
                    for _ in 0..i {
                        params += 1;
                        macs += 1;
                    }
                }
                params += l.bias.as_ref().map_or(0, |b| b.data().len() as u64);
                shape = vec![o];
            }
            Layer::ResidualAdd { source, projection } => {
                if let Some(p) = projection {
                    params += p.conv.weight.data().len() as u64;
                    params += p.conv.bias.as_ref().map_or(0, |b| b.data().len() as u64);
                    params += (p.bn.gamma.data().len() + p.bn.beta.data().len()) as u64;
                    let (n, _) = conv_macs(&p.conv.weight, p.conv.stride, p.conv.padding, &outputs[*source]);
                    macs += n;
                }
            }
        }
        outputs.push(shape.clone());
    }
    (params, macs)
}

pub struct Case {
    pub name: String,
    pub run: Box<dyn Fn() -> scop::Result<()>>,
}

fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(payload);
    v
}

fn mnist_case(name: String, images: Vec<u8>, labels: Vec<u8>) -> Case {
    Case {
        name,
        run: Box::new(move || {
            let x = parse_idx_images(&images)?;
            let y = parse_idx_labels(&labels)?;
            Dataset::new(x, y, 10, Split::Train).map(|_| ())
        }),
    }
}

fn cifar_case(name: String, bytes: Vec<u8>) -> Case {
    Case {
        name,
        run: Box::new(move || {
            let (pixels, labels) = parse_cifar_records(&bytes)?;
            let n = labels.len();
            Dataset::new(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, 10, Split::Train).map(|_| ())
        }),
    }
}

fn decoder_case(name: String, bytes: Vec<u8>, decode: fn(&[u8]) -> scop::Result<()>) -> Case {
    Case {
        name,
        run: Box::new(move || decode(&bytes)),
    }
}

fn flip_bit<R: Rng>(bytes: &[u8], end: usize, rng: &mut R) -> Vec<u8> {
    let mut b = bytes.to_vec();
    let i = rng.random_range(0..end.min(b.len()));
    b[i] ^= 1 << rng.random_range(0..8);
    b
}

fn truncate<R: Rng>(bytes: &[u8], rng: &mut R) -> Vec<u8> {
    bytes[..rng.random_range(0..bytes.len())].to_vec()
}

fn extend<R: Rng>(bytes: &[u8], rng: &mut R) -> Vec<u8> {
    let mut b = bytes.to_vec();
    for _ in 0..rng.random_range(1..6) {
        b.push(rng.random());
    }
    b
}

/// 200 structurally invalid inputs, 50 per format. Every one must be
/// rejected with an error.
pub fn corrupt_corpus() -> Vec<Case> {
    let mut rng = stream(2024, "corpus");
    let mut cases = Vec::new();

    let n = 5u32;
    let pixels: Vec<u8> = (0..n * 16).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let images = idx(0x0803, &[n, 4, 4], &pixels);
    let lab = idx(0x0801, &[n], &labels);
    assert!(parse_idx_images(&images).is_ok() && parse_idx_labels(&lab).is_ok());
    for i in 0..10 {
        cases.push(mnist_case(format!("idx images truncated {i}"), truncate(&images, &mut rng), lab.clone()));
    }
    for i in 0..5 {
        cases.push(mnist_case(format!("idx labels truncated {i}"), images.clone(), truncate(&lab, &mut rng)));
        cases.push(mnist_case(format!("idx images extended {i}"), extend(&images, &mut rng), lab.clone()));
    }
    for i in 0..3 {
        cases.push(mnist_case(format!("idx labels extended {i}"), images.clone(), extend(&lab, &mut rng)));
    }
    for i in 0..8 {
        let mut b = images.clone();
        b[rng.random_range(0..4)] ^= 1 << rng.random_range(0..8);
        cases.push(mnist_case(format!("idx magic bit flip {i}"), b, lab.clone()));
    }
    for i in 0..10 {
        let mut b = images.clone();
        b[rng.random_range(4..16)] ^= 1 << rng.random_range(0..8);
        cases.push(mnist_case(format!("idx dimension bit flip {i}"), b, lab.clone()));
    }
    for i in 0..6 {
        let mut l = labels.clone();
        let at = rng.random_range(0..l.len());
        l[at] = rng.random_range(10..=255);
        cases.push(mnist_case(format!("idx label out of range {i}"), images.clone(), idx(0x0801, &[n], &l)));
    }
    cases.push(mnist_case("idx empty images".into(), Vec::new(), lab.clone()));
    cases.push(mnist_case("idx header only".into(), images[..16].to_vec(), lab.clone()));
    cases.push(mnist_case(
        "idx label count mismatch".into(),
        images.clone(),
        idx(0x0801, &[n - 1], &labels[..n as usize - 1]),
    ));

    let mut cifar = Vec::new();
    for _ in 0..3 {
        cifar.push(rng.random_range(0..10u8));
        cifar.extend((0..3072).map(|_| rng.random::<u8>()));
    }
    for i in 0..20 {
        let cut = rng.random_range(1..cifar.len());
        let b = if cut % 3073 == 0 { cifar[..cut - 1].to_vec() } else { cifar[..cut].to_vec() };
        cases.push(cifar_case(format!("cifar truncated {i}"), b));
    }
    for i in 0..10 {
        cases.push(cifar_case(format!("cifar extended {i}"), extend(&cifar, &mut rng)));
    }
    for i in 0..15 {
        let mut b = cifar.clone();
        b[3073 * rng.random_range(0..3)] = rng.random_range(10..=255);
        cases.push(cifar_case(format!("cifar label out of range {i}"), b));
    }
    cases.push(cifar_case("cifar empty".into(), Vec::new()));
    for i in 0..4 {
        cases.push(cifar_case(format!("cifar tiny {i}"), cifar[..i + 1].to_vec()));
    }

    let net = build_arch("small-cnn", &[1, 6, 6], 3, &mut stream(0, "corpus-net")).unwrap();
    let ckpt = encode_network(&net);
    let decode_net: fn(&[u8]) -> scop::Result<()> = |b| decode_network(b).map(|_| ());
    let decode_ckpt: fn(&[u8]) -> scop::Result<()> = |b| decode_checkpoint(b).map(|_| ());
    assert!(decode_net(&ckpt).is_ok());
    for i in 0..15 {
        cases.push(decoder_case(format!("checkpoint truncated {i}"), truncate(&ckpt, &mut rng), decode_net));
    }
    for i in 0..25 {
        cases.push(decoder_case(format!("checkpoint bit flip {i}"), flip_bit(&ckpt, ckpt.len(), &mut rng), decode_net));
    }
    for i in 0..5 {
        cases.push(decoder_case(format!("checkpoint header bit flip {i}"), flip_bit(&ckpt, 16, &mut rng), decode_ckpt));
        cases.push(decoder_case(format!("checkpoint extended {i}"), extend(&ckpt, &mut rng), decode_net));
    }

    let cache = encode_knockoff_cache(&Tensor::randn(&[3, 1, 4, 4], 1.0, &mut rng));
    let decode_cache: fn(&[u8]) -> scop::Result<()> = |b| decode_knockoff_cache(b).map(|_| ());
    assert!(decode_cache(&cache).is_ok());
    for i in 0..15 {
        cases.push(decoder_case(format!("knockoff cache truncated {i}"), truncate(&cache, &mut rng), decode_cache));
    }
    for i in 0..30 {
        cases.push(decoder_case(format!("knockoff cache bit flip {i}"), flip_bit(&cache, cache.len(), &mut rng), decode_cache));
    }
    for i in 0..5 {
        cases.push(decoder_case(format!("knockoff cache extended {i}"), extend(&cache, &mut rng), decode_cache));
    }
    cases
}

/// Runs every case, returning the names of cases that were accepted or panicked.
pub fn corpus_failures(cases: &[Case]) -> Vec<String> {
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    let mut bad = Vec::new();
    for c in cases {
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| (c.run)())) {
            Ok(Err(_)) => {}
            Ok(Ok(())) => bad.push(format!("{}: accepted", c.name)),
            Err(_) => bad.push(format!("{}: panicked", c.name)),
        }
    }
    std::panic::set_hook(hook);
    bad
}
