//! Dense tensors, the differentiation tape, Adam and the `CPXT` file format.

pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::gradcheck::check_gradients;
    use super::*;
    use crate::window::Window;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn assert_fd<F>(inputs: &[Tensor<f64>], f: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>,
    {
        let r = check_gradients(inputs, 1e-3, f).unwrap();
        assert!(r.max_rel_err < 1e-3, "finite-difference mismatch: {r:?}");
    }

    // Weighted sum so every output element gets a distinct upstream gradient.
    fn probe(t: &mut Tape<f64>, x: Var) -> crate::Result<Var> {
        let n = t.value(x).len();
        let shape = t.shape(x).to_vec();
        let w = t.constant(Tensor::from_fn(&shape, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.4));
        debug_assert_eq!(n, t.value(w).len());
        let p = t.mul(x, w)?;
        t.sum(p)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let y = t.softmax(x, None).unwrap();
        assert_eq!(t.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn grad_reverse_is_identity_forward_and_negates_backward() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::from_fn(&[2, 2], |i| i as f32 - 1.5));
        let y = t.grad_reverse(x, 1.0).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0; 4]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut t = Tape::<f32>::new();
        let x = t.param(Tensor::full(&[2, 2], 3.0));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn identity_kernel_conv_leaves_input_unchanged() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32));
        let w = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = t.constant(Tensor::zeros(&[1]));
        let y = t.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn backward_rejects_non_scalar_loss_and_zero_fills_disconnected_leaves() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::zeros(&[3]));
        let unused = t.param(Tensor::zeros(&[2]));
        assert!(t.backward(x).is_err());
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[1], vec![0.0]).unwrap());
        assert!(t.log(x).is_err());
        let big = t.constant(Tensor::new(&[1], vec![1e6]).unwrap());
        assert!(t.exp(big).is_err());
    }

    #[test]
    fn fd_elementwise_and_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(&mut rng, &[3, 4]);
        let b = rand_t(&mut rng, &[3, 4]);
        assert_fd(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let m = t.mul(s, v[1])?;
            let d = t.sub(m, v[0])?;
            let e = t.exp(d)?;
            let l = t.scale(e, 0.7)?;
            probe(t, l)
        });
        let pos = Tensor::from_fn(&[3, 4], |i| 0.5 + i as f64 * 0.1);
        assert_fd(&[pos], |t, v| {
            let l = t.log(v[0])?;
            let m = t.mean(l)?;
            let s = t.sum(l)?;
            t.add(m, s)
        });
        // away from the kinks of relu and abs
        let shifted = a.map(|x| if x.abs() < 0.05 { x + 0.2 } else { x });
        assert_fd(&[shifted], |t, v| {
            let r = t.relu(v[0])?;
            let ab = t.abs(v[0])?;
            let sp = t.softplus(v[0])?;
            let sg = t.sigmoid(v[0])?;
            let x = t.add(r, ab)?;
            let y = t.add(sp, sg)?;
            let z = t.mul(x, y)?;
            probe(t, z)
        });
        let c = rand_t(&mut rng, &[4]);
        assert_fd(&[b, c], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            probe(t, y)
        });
    }

    #[test]
    fn fd_softmax_family_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_t(&mut rng, &[3, 4]);
        let mask: Arc<[bool]> = (0..12).map(|i| i % 4 != 1 || i == 1).collect::<Vec<_>>().into();
        let m1 = mask.clone();
        assert_fd(&[x.clone()], move |t, v| {
            let y = t.softmax(v[0], Some(m1.clone()))?;
            probe(t, y)
        });
        assert_fd(&[x.clone()], move |t, v| {
            let y = t.log_softmax(v[0], Some(mask.clone()))?;
            probe(t, y)
        });
        let target = Arc::new(Tensor::from_fn(&[3, 4], |i| [0.1, 0.2, 0.3, 0.4][i % 4]));
        assert_fd(&[x], move |t, v| {
            let y = t.log_softmax(v[0], None)?;
            t.kl_rows(y, target.clone(), vec![0.5, 0.0, 0.25])
        });
    }

    #[test]
    fn fd_matmul_all_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let a = rand_t(&mut rng, if ta { &[4, 3] } else { &[3, 4] });
            let b = rand_t(&mut rng, if tb { &[2, 4] } else { &[4, 2] });
            assert_fd(&[a, b], |t, v| {
                let y = t.matmul(v[0], v[1], ta, tb)?;
                probe(t, y)
            });
        }
    }

    #[test]
    fn fd_conv2d_with_stride_and_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, &[2, 2, 5, 4]);
        let w = rand_t(&mut rng, &[3, 2, 3, 3]);
        let b = rand_t(&mut rng, &[3]);
        for stride in [1, 2] {
            assert_fd(&[x.clone(), w.clone(), b.clone()], |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, 1)?;
                probe(t, y)
            });
        }
    }

    #[test]
    fn fd_layout_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&mut rng, &[2, 3, 8]);
        assert_fd(&[x.clone()], |t, v| {
            let p = t.permute(v[0], &[2, 0, 1])?;
            let r = t.reshape(p, &[8, 6])?;
            let s = t.slice(r, 0, 2, 3)?;
            let q = t.pad(s, 1, 1, 2)?;
            probe(t, q)
        });
        assert_fd(&[x.clone()], |t, v| {
            let y = t.pixel_shuffle(v[0], 2)?;
            probe(t, y)
        });
        let img = rand_t(&mut rng, &[4, 6, 2]);
        assert_fd(&[img.clone()], |t, v| {
            let y = t.bilinear_resize(v[0], 2, 3)?;
            probe(t, y)
        });
        assert_fd(&[img], |t, v| {
            let y = t.bilinear_resize(v[0], 7, 5)?;
            probe(t, y)
        });
        assert_fd(&[x], |t, v| {
            let y = t.l2_normalize(v[0])?;
            probe(t, y)
        });
    }

    #[test]
    fn fd_window_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let win = Window::new(1);
        let f1 = rand_t(&mut rng, &[3, 4, 2]);
        let f2 = rand_t(&mut rng, &[3, 4, 2]);
        assert_fd(&[f1.clone(), f2.clone()], |t, v| {
            let y = t.local_corr(v[0], v[1], win, 1.7)?;
            probe(t, y)
        });
        let wts = rand_t(&mut rng, &[3, 4, 9]);
        assert_fd(&[wts, f2], |t, v| {
            let y = t.window_gather(v[0], v[1], win)?;
            probe(t, y)
        });
    }

    #[test]
    fn fd_grad_reverse_scales_by_minus_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_t(&mut rng, &[2, 3]);
        let mut t = Tape::<f64>::new();
        let xv = t.param(x.clone());
        let r = t.grad_reverse(xv, 0.5).unwrap();
        let l = probe(&mut t, r).unwrap();
        let g_rev = t.backward(l).unwrap().get(xv).unwrap().clone();
        let mut t2 = Tape::<f64>::new();
        let xv2 = t2.param(x);
        let l2 = probe(&mut t2, xv2).unwrap();
        let g_id = t2.backward(l2).unwrap().get(xv2).unwrap().clone();
        for (a, b) in g_rev.data().iter().zip(g_id.data()) {
            assert_eq!(*a, -0.5 * *b);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_masked_entries_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f32>::from_fn(&[5, 6], |_| rng.gen_range(-5.0..5.0));
        let mask: Arc<[bool]> = (0..30).map(|i| i % 3 != 2).collect::<Vec<_>>().into();
        let mut t = Tape::new();
        let xv = t.constant(x);
        let y = t.softmax(xv, Some(mask.clone())).unwrap();
        for (r, row) in t.value(y).data().chunks(6).enumerate() {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            for (j, v) in row.iter().enumerate() {
                assert!(*v >= 0.0);
                if !mask[r * 6 + j] {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let x = Tensor::<f32>::from_fn(&[1, 3, 8, 8], |_| rng.gen_range(-1.0..1.0));
            let w = Tensor::<f32>::from_fn(&[4, 3, 3, 3], |_| rng.gen_range(-1.0..1.0));
            let mut t = Tape::new();
            let xv = t.constant(x);
            let wv = t.param(w);
            let bv = t.param(Tensor::zeros(&[4]));
            let y = t.conv2d(xv, wv, bv, 2, 1).unwrap();
            let y = t.relu(y).unwrap();
            let s = t.sum(y).unwrap();
            let g = t.backward(s).unwrap();
            (t.value(s).clone(), g.get(wv).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
