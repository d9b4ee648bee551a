//! Decoder `D_m`: channel assembly, dilated ASPP, conv block and the
//! two-class classifier head.

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ConvParams;
use crate::tensor::{ConvSpec, Real};

/// Guidance signals feeding the decoder. Disabled modules are `None`; the
/// channel order is fixed: correlation, attention map, prior mask,
/// prototype (tiled), query features.
pub struct DecoderInputs {
    pub correlation: Option<Var>,
    pub attention_map: Option<Var>,
    pub prior_mask: Option<Var>,
    pub prototype: Option<Var>,
    pub query_features: Var,
}

pub fn assemble_decoder_input<T: Real>(tape: &mut Tape<T>, inputs: &DecoderInputs) -> Result<Var> {
    let (_, h, w) = tape.value(inputs.query_features).dims3("assemble_decoder_input")?;
    let prototype = inputs.prototype.map(|v| tape.tile(v, h, w)).transpose()?;
    let parts: Vec<Var> = [
        inputs.correlation,
        inputs.attention_map,
        inputs.prior_mask,
        prototype,
        Some(inputs.query_features),
    ]
    .into_iter()
    .flatten()
    .collect();
    tape.concat_channels(&parts)
}

#[derive(Clone, Debug)]
pub struct AsppParams {
    /// One 3×3 branch per dilation rate, then the 1×1 branch.
    pub branches: Vec<ConvParams>,
}

impl AsppParams {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        cin: usize,
        cout: usize,
        rates: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let count = rates.len() + 1;
        if cout % count != 0 || rates.contains(&0) {
            return Err(Error::Config(format!(
                "decoder width {cout} must split evenly across {count} ASPP branches with positive rates"
            )));
        }
        let width = cout / count;
        let mut branches: Vec<ConvParams> = rates
            .iter()
            .map(|&r| ConvParams::new(store, &format!("aspp.rate{r}"), cin, width, 3, ConvSpec::same(3, r), rng))
            .collect();
        branches.push(ConvParams::new(store, "aspp.pointwise", cin, width, 1, ConvSpec::POINTWISE, rng));
        Ok(AsppParams { branches })
    }
}

/// Parallel dilated branches, each followed by ReLU, concatenated.
pub fn aspp<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, params: &AsppParams, x: Var) -> Result<Var> {
    let outs = params
        .branches
        .iter()
        .map(|b| {
            let y = b.forward(tape, store, x)?;
            Ok(tape.relu(y))
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_channels(&outs)
}

#[derive(Clone, Debug)]
pub struct ConvBlockParams {
    pub first: ConvParams,
    pub second: ConvParams,
}

/// Two rounds of 3×3 conv + ReLU.
pub fn conv_block<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, params: &ConvBlockParams, x: Var) -> Result<Var> {
    let y = params.first.forward(tape, store, x)?;
    let y = tape.relu(y);
    let y = params.second.forward(tape, store, y)?;
    Ok(tape.relu(y))
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub hidden: ConvParams,
    pub logits: ConvParams,
}

/// 3×3 conv + ReLU, 1×1 conv to two logits, bilinear upsampling to
/// `out_size`, channel softmax. Channel 1 is the foreground probability.
pub fn classify<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &HeadParams,
    x: Var,
    out_size: (usize, usize),
) -> Result<Var> {
    let y = params.hidden.forward(tape, store, x)?;
    let y = tape.relu(y);
    let logits = params.logits.forward(tape, store, y)?;
    let up = tape.resize(logits, out_size.0, out_size.1)?;
    tape.softmax_channel(up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{self, Tensor};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn assemble_default_width_and_order() {
        let mut tape = Tape::<f64>::new();
        let corr = tape.constant(Tensor::full(&[64, 4, 4], 1.0));
        let att = tape.constant(Tensor::zeros(&[64, 4, 4]));
        let prior = tape.constant(Tensor::zeros(&[1, 4, 4]));
        let proto = tape.constant(Tensor::from_fn(&[64, 1, 1], |i| i as f64));
        let fq = tape.constant(Tensor::full(&[64, 4, 4], 3.0));
        let inputs = DecoderInputs {
            correlation: Some(corr),
            attention_map: Some(att),
            prior_mask: Some(prior),
            prototype: Some(proto),
            query_features: fq,
        };
        let x = assemble_decoder_input(&mut tape, &inputs).unwrap();
        let v = tape.value(x);
        assert_eq!(v.shape(), &[257, 4, 4]);
        assert!(v.data()[..64 * 16].iter().all(|&x| x == 1.0));
        assert_eq!(v.channel(129 + 5).unwrap(), Tensor::full(&[1, 4, 4], 5.0));
        assert!(v.data()[193 * 16..].iter().all(|&x| x == 3.0));
    }

    #[test]
    fn aspp_zero_weights_give_bias_maps_and_branches_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let params = AsppParams::new(&mut store, 5, 8, &[1, 2, 4], &mut rng).unwrap();
        let x = random(&[5, 9, 9], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = aspp(&mut tape, &store, &params, xv).unwrap();
        assert_eq!(tape.value(y).shape(), &[8, 9, 9]);
        for (i, b) in params.branches.iter().enumerate() {
            let w = &store.get(b.weight).value;
            let direct = tensor::conv2d(&x, w, &store.get(b.bias).value, b.spec).unwrap();
            let direct = tensor::activation(&direct, tensor::Activation::Relu);
            let got = &tape.value(y).data()[i * 2 * 81..(i + 1) * 2 * 81];
            for (a, e) in got.iter().zip(direct.data()) {
                assert!((a - e).abs() < 1e-6);
            }
        }

        for p in store.iter_mut() {
            if p.name.ends_with("weight") {
                p.value.data_mut().fill(0.0);
            } else {
                p.value.data_mut().fill(0.25);
            }
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = aspp(&mut tape, &store, &params, xv).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
        assert!(AsppParams::new(&mut store, 5, 6, &[1, 2, 4], &mut rng).is_err());
    }

    #[test]
    fn conv_block_zero_input_is_relu_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let params = ConvBlockParams {
            first: ConvParams::new(&mut store, "b1", 4, 4, 3, ConvSpec::same(3, 1), &mut rng),
            second: ConvParams::new(&mut store, "b2", 4, 4, 3, ConvSpec::same(3, 1), &mut rng),
        };
        store.get_mut(params.second.bias).value = Tensor::from_vec(&[4], vec![-1.0, 0.5, 0.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 5, 5]));
        let y = conv_block(&mut tape, &store, &params, x).unwrap();
        for (c, e) in [0.0, 0.5, 0.0, 2.0].into_iter().enumerate() {
            assert!(tape.value(y).channel(c).unwrap().data().iter().all(|&v| v == e));
        }
    }

    #[test]
    fn classify_equal_logits_are_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let params = HeadParams {
            hidden: ConvParams::new(&mut store, "h", 4, 4, 3, ConvSpec::same(3, 1), &mut rng),
            logits: ConvParams::new(&mut store, "o", 4, 2, 1, ConvSpec::POINTWISE, &mut rng),
        };
        let mut tape = Tape::new();
        let x = tape.constant(random(&[4, 4, 4], &mut rng));
        let p = classify(&mut tape, &store, &params, x, (16, 16)).unwrap();
        let v = tape.value(p);
        assert_eq!(v.shape(), &[2, 16, 16]);
        for i in 0..256 {
            assert!((v.data()[i] + v.data()[256 + i] - 1.0).abs() < 1e-6);
        }

        store.get_mut(params.logits.weight).value.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[4, 4, 4], &mut rng));
        let p = classify(&mut tape, &store, &params, x, (16, 16)).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.5));
    }
}
