use nwcrf_core::gradcheck::{check, DEFAULT_STEP};
use nwcrf_core::tape::ZERO_SOURCE;
use nwcrf_core::{Initializer, Result, Tape, Tensor, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-4;

fn random(seed: u64, extents: &[usize]) -> Tensor {
    Initializer::new(seed).uniform(extents, 1.0)
}

/// Random linear functional of `v`, so that every output entry contributes
/// with a distinct weight.
fn project(tape: &mut Tape, v: Var) -> Result<Var> {
    let extents = tape.value(v).extents().to_vec();
    let w = tape.leaf(random(0xabc, &extents));
    let prod = tape.mul(v, w)?;
    Ok(tape.sum(prod))
}

fn assert_grads(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let report = check(inputs, |t, v| { let out = f(t, v)?; project(t, out) }, DEFAULT_STEP, None).unwrap();
    assert!(report.passes(TOL), "worst error {} per input {:?}", report.worst(), report.max_error);
    assert!(report.entries_checked > 0);
}

#[test]
fn matmul_gradients() {
    assert_grads(&[random(1, &[3, 4]), random(2, &[4, 2])], |t, v| t.matmul(v[0], v[1]));
}

#[test]
fn elementwise_gradients() {
    let ins = [random(3, &[2, 3, 2]), random(4, &[2, 3, 2])];
    assert_grads(&ins, |t, v| t.add(v[0], v[1]));
    assert_grads(&ins, |t, v| t.sub(v[0], v[1]));
    assert_grads(&ins, |t, v| t.mul(v[0], v[1]));
    assert_grads(&ins[..1], |t, v| Ok(t.scale(v[0], -2.5)));
    assert_grads(&ins[..1], |t, v| Ok(t.gelu(v[0])));
    assert_grads(&ins[..1], |t, v| Ok(t.sigmoid(v[0])));
}

#[test]
fn bias_and_reshape_gradients() {
    assert_grads(&[random(5, &[3, 4]), random(6, &[4])], |t, v| t.add_bias(v[0], v[1]));
    assert_grads(&[random(7, &[2, 6])], |t, v| t.reshape(v[0], &[3, 2, 2]));
    assert_grads(&[random(8, &[3, 5])], |t, v| t.transpose(v[0]));
}

#[test]
fn softmax_gradients() {
    let mask: Vec<bool> = (0..12).map(|i| i % 4 != 1).collect();
    assert_grads(&[random(9, &[3, 4])], |t, v| t.softmax_rows(v[0], None));
    assert_grads(&[random(10, &[3, 4])], |t, v| t.softmax_rows(v[0], Some(&mask)));
}

#[test]
fn conv_gradients() {
    let ins = [random(11, &[4, 5, 3]), random(12, &[3, 3, 3, 2]), random(13, &[2])];
    assert_grads(&ins, |t, v| t.conv2d(v[0], v[1], v[2]));
    let one_pixel = [random(14, &[1, 1, 2]), random(15, &[3, 3, 2, 3]), random(16, &[3])];
    assert_grads(&one_pixel, |t, v| t.conv2d(v[0], v[1], v[2]));
}

#[test]
fn gather_gradients() {
    let sources = vec![3, 0, ZERO_SOURCE, 3, 5, 1, ZERO_SOURCE, 2];
    assert_grads(&[random(17, &[6])], move |t, v| t.gather(v[0], sources.clone(), &[2, 4]));
}

#[test]
fn rearrange_gradients() {
    assert_grads(&[random(18, &[3, 2, 8])], |t, v| t.pixel_rearrange(v[0]));
    assert_grads(&[random(19, &[4, 6, 2])], |t, v| t.pixel_unrearrange(v[0]));
}

#[test]
fn pooling_gradients() {
    assert_grads(&[random(20, &[5, 7, 2])], |t, v| t.avg_pool_to(v[0], 3));
    assert_grads(&[random(21, &[2, 3, 2])], |t, v| t.upsample_nearest(v[0], 5, 7));
}

#[test]
fn slicing_gradients() {
    assert_grads(&[random(22, &[3, 6])], |t, v| t.slice_last(v[0], 2, 3));
    assert_grads(&[random(23, &[2, 2, 3]), random(24, &[2, 2, 1])], |t, v| t.concat_last(&[v[0], v[1]]));
    assert_grads(&[random(25, &[2, 3]), random(26, &[4, 3])], |t, v| t.concat_rows(&[v[0], v[1]]));
}

#[test]
fn normalization_and_reduction_gradients() {
    let ins = [random(27, &[3, 5]), random(28, &[5]), random(29, &[5])];
    assert_grads(&ins, |t, v| t.layer_norm(v[0], v[1], v[2]));
    assert_grads(&ins[..1], |t, v| Ok(t.sum(v[0])));
    assert_grads(&ins[..1], |t, v| Ok(t.mean(v[0])));
}

#[test]
fn silog_gradients_at_random_positive_points() {
    let pred = random(30, &[4, 5]).map(|v| 1.2 + v);
    let target = random(31, &[4, 5]).map(|v| 3.0 + 2.0 * v);
    let valid: Vec<bool> = (0..20).map(|i| i % 7 != 2).collect();
    let report = check(&[pred], |t, v| t.silog(v[0], &target, &valid, 0.85, 10.0), DEFAULT_STEP, None).unwrap();
    assert!(report.passes(TOL), "{:?}", report.max_error);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let v = tape.leaf(random(1, &[2, 2]));
    assert!(tape.backward(v).is_err());
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(logits in matrix(3, 5), shift in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let a = tape.leaf(logits.clone());
        let b = tape.leaf(logits.map(|v| v + shift));
        let sa = tape.softmax_rows(a, None).unwrap();
        let sb = tape.softmax_rows(b, None).unwrap();
        for r in tape.value(sa).data().chunks(5) {
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        prop_assert!(tape.value(sa).max_abs_diff(tape.value(sb)).unwrap() < 1e-12);
    }

    #[test]
    fn rearrange_round_trips(h in 1usize..4, w in 1usize..4, c4 in 1usize..3, seed in any::<u64>()) {
        let x = random(seed, &[h, w, 4 * c4]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let up = tape.pixel_rearrange(v).unwrap();
        let back = tape.pixel_unrearrange(up).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn matmul_is_associative(a in matrix(2, 3), b in matrix(3, 4), c in matrix(4, 2)) {
        let mut tape = Tape::new();
        let (a, b, c) = (tape.leaf(a), tape.leaf(b), tape.leaf(c));
        let ab = tape.matmul(a, b).unwrap();
        let left = tape.matmul(ab, c).unwrap();
        let bc = tape.matmul(b, c).unwrap();
        let right = tape.matmul(a, bc).unwrap();
        let scale = tape.value(left).data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        prop_assert!(tape.value(left).max_abs_diff(tape.value(right)).unwrap() <= 1e-9 * scale);
    }
}
