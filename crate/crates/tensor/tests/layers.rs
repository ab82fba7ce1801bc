use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sde_tensor::checkpoint::{load_into, read_checkpoint, write_checkpoint};
use sde_tensor::nn::{Conv3x3, GroupNorm, Init, LayerNorm, Linear, MultiHeadAttention};
use sde_tensor::optim::AdamW;
use sde_tensor::{grad_check_params, ParamStore, Session, Tensor, TensorError};

#[test]
fn attention_block_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f64>::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", 8, 6, 2, &mut rng).unwrap();
    let ln = LayerNorm::new(&mut store, "ln", 8).unwrap();
    // Enlarge the projections so the softmax is far from uniform.
    for id in store.ids().collect::<Vec<_>>() {
        let t = store.get(id).clone();
        if t.rank() == 2 {
            *store.get_mut(id) = Tensor::randn(t.shape().to_vec(), 0.5, &mut rng);
        }
    }
    let x = Tensor::<f64>::randn([2, 3, 8], 1.0, &mut rng);
    let kv = Tensor::<f64>::randn([2, 4, 6], 1.0, &mut rng);
    let target = Tensor::<f64>::randn([2, 3, 8], 1.0, &mut rng);
    let err = grad_check_params(
        &store,
        |s| {
            let xv = s.constant(x.clone())?;
            let kvv = s.constant(kv.clone())?;
            let h = ln.forward(s, xv)?;
            let y = attn.forward(s, h, kvv, None)?;
            let d = s.sub(y, s.constant(target.clone())?)?;
            let sq = s.mul(d, d)?;
            s.mean(sq)
        },
        1e-5,
        None,
        1,
    )
    .unwrap();
    assert!(err < 1e-4, "attention relative error {err:e}");
}

#[test]
fn conv_stack_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let c1 = Conv3x3::new(&mut store, "c1", 2, 4, 1, &mut rng).unwrap();
    let g1 = GroupNorm::new(&mut store, "g1", 2, 4).unwrap();
    let c2 = Conv3x3::new(&mut store, "c2", 4, 2, 2, &mut rng).unwrap();
    let x = Tensor::<f64>::randn([2, 16, 2], 1.0, &mut rng);
    let err = grad_check_params(
        &store,
        |s| {
            let h = c1.forward(s, s.constant(x.clone())?, 4, 4)?;
            let h = g1.forward(s, h)?;
            let h = s.leaky_relu(h)?;
            let h = c2.forward(s, h, 4, 4)?;
            let sq = s.mul(h, h)?;
            s.sum(sq)
        },
        1e-5,
        None,
        2,
    )
    .unwrap();
    assert!(err < 1e-4, "conv relative error {err:e}");
}

#[test]
fn conv_wrong_extent_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let c = Conv3x3::new(&mut store, "c", 2, 4, 1, &mut rng).unwrap();
    let s = Session::new(&store);
    let x = s.constant(Tensor::zeros([1, 9, 2])).unwrap();
    assert!(c.forward(&s, x, 4, 4).is_err());
}

#[test]
fn adamw_fits_a_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::<f32>::new();
    let lin = Linear::new(&mut store, "lin", 3, 2, Init::Normal(0.1), &mut rng).unwrap();
    let x = Tensor::<f32>::randn([16, 3], 1.0, &mut rng);
    let true_w = Tensor::<f32>::randn([3, 2], 1.0, &mut rng);
    let y = {
        let s = Session::inference(&store);
        let p = s.matmul(s.constant(x.clone()).unwrap(), s.constant(true_w.clone()).unwrap()).unwrap();
        (*s.value(p)).clone()
    };
    let mut opt = AdamW::new(0.05, 0.9, 0.999, 0.0);
    let mut last = f32::MAX;
    for _ in 0..400 {
        let s = Session::new(&store);
        let pred = lin.forward(&s, s.constant(x.clone()).unwrap()).unwrap();
        let d = s.sub(pred, s.constant(y.clone()).unwrap()).unwrap();
        let sq = s.mul(d, d).unwrap();
        let loss = s.mean(sq).unwrap();
        last = s.value(loss).item();
        let g = s.backward(loss).unwrap();
        drop(s);
        opt.step(&mut store, &g);
    }
    assert!(last < 1e-4, "final loss {last}");
}

#[test]
fn checkpoint_round_trip_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f32>::new();
    Linear::new(&mut store, "a", 2, 3, Init::Normal(1.0), &mut rng).unwrap();
    let mut bytes = Vec::new();
    write_checkpoint(&store, &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"SDE1");
    // first record: name "a.w"
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
    assert_eq!(&bytes[8..11], b"a.w");
    assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 2);
    let first = f32::from_le_bytes(bytes[23..27].try_into().unwrap());
    assert_eq!(first, store.get(store.id_of("a.w").unwrap()).data()[0]);

    let records = read_checkpoint(bytes.as_slice()).unwrap();
    let mut other = ParamStore::<f32>::new();
    Linear::new(&mut other, "a", 2, 3, Init::Zeros, &mut rng).unwrap();
    load_into(&mut other, &records).unwrap();
    for id in store.ids() {
        assert_eq!(store.get(id), other.get(id));
    }

    let mut wrong = ParamStore::<f32>::new();
    Linear::new(&mut wrong, "a", 3, 3, Init::Zeros, &mut rng).unwrap();
    assert!(matches!(load_into(&mut wrong, &records), Err(TensorError::ShapeMismatch { .. })));
    assert!(read_checkpoint(&b"XXXX"[..]).is_err());
    assert!(read_checkpoint(&bytes[..bytes.len() - 2]).is_err());
}
