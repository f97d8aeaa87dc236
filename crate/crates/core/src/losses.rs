//! Heatmap supervision, output distillation and token selection.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mean squared error over the joints enabled in `joint_mask`.
pub fn mse_heatmap_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: &Var<S>,
    target: &Var<S>,
    joint_mask: Option<&[bool]>,
) -> Result<Var<S>> {
    tape.mse(pred, target, joint_mask)
}

/// `MSE(student, teacher)` with the teacher treated as a constant.
pub fn output_distillation_loss<S: Scalar>(tape: &mut Tape<S>, student: &Var<S>, teacher: &Var<S>) -> Result<Var<S>> {
    let teacher = tape.detach(teacher);
    tape.mse(student, &teacher, None)
}

/// Supervised MSE plus `lambda` times the distillation term when a teacher is given.
pub fn training_loss<S: Scalar>(
    tape: &mut Tape<S>,
    pred: &Var<S>,
    target: &Var<S>,
    joint_mask: Option<&[bool]>,
    teacher: Option<&Var<S>>,
    lambda: f64,
) -> Result<Var<S>> {
    let sup = mse_heatmap_loss(tape, pred, target, joint_mask)?;
    match teacher {
        Some(t) if lambda != 0.0 => {
            let od = output_distillation_loss(tape, pred, t)?;
            let od = tape.scale(&od, lambda)?;
            tape.add(&sup, &od)
        }
        _ => Ok(sup),
    }
}

/// Plain mean squared error of two equal-shape tensors, accumulated in f64.
pub fn mse_value<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mse_value", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    Ok(total / a.numel() as f64)
}

/// Maps a token and an input context to a heatmap.
pub trait TokenRenderer<S: Scalar> {
    type Token;
    type Context;

    fn render(&self, token: &Self::Token, context: &Self::Context) -> Result<Tensor<S>>;
}

/// Tokens that are heatmaps already; the context is ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct LiteralRenderer;

impl<S: Scalar> TokenRenderer<S> for LiteralRenderer {
    type Token = Tensor<S>;
    type Context = ();

    fn render(&self, token: &Tensor<S>, _: &()) -> Result<Tensor<S>> {
        Ok(token.clone())
    }
}

#[derive(Debug, Clone)]
pub struct TokenCodebook<T> {
    tokens: Vec<T>,
}

impl<T> TokenCodebook<T> {
    pub fn new(tokens: Vec<T>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[T] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenChoice {
    pub index: usize,
    pub mse: f64,
}

/// Exhaustive `argmin_t MSE(render(t, context), target)`; ties go to the
/// lowest index.
pub fn select_token<S: Scalar, R: TokenRenderer<S>>(
    codebook: &TokenCodebook<R::Token>,
    renderer: &R,
    context: &R::Context,
    target: &Tensor<S>,
) -> Result<TokenChoice> {
    if codebook.is_empty() {
        return Err(Error::Usage("cannot select from an empty codebook".into()));
    }
    let mut best: Option<TokenChoice> = None;
    for (index, token) in codebook.tokens().iter().enumerate() {
        let rendered = renderer.render(token, context)?;
        let mse = mse_value(&rendered, target)?;
        if best.is_none_or(|b| mse < b.mse) {
            best = Some(TokenChoice { index, mse });
        }
    }
    Ok(best.expect("non-empty codebook"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::indexed_rng;

    #[test]
    fn constant_offset_gives_c_squared() {
        let t = Tensor::<f64>::randn(&[2, 3, 4, 4], &mut indexed_rng(0, 1)).unwrap();
        let p = t.map(|v| v + 0.3);
        let mut tape = Tape::inference();
        let l = mse_heatmap_loss(&mut tape, &Var::constant(p), &Var::constant(t.clone()), None).unwrap();
        assert!((l.value().data()[0] - 0.09).abs() < 1e-12);
        let z = mse_heatmap_loss(&mut tape, &Var::constant(t.clone()), &Var::constant(t), None).unwrap();
        assert_eq!(z.value().data()[0], 0.0);
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let mut rng = indexed_rng(0, 2);
        let mut tape = Tape::new(crate::Mode::Train);
        let s = tape.leaf(Tensor::<f64>::randn(&[1, 2, 3, 3], &mut rng).unwrap());
        let t = tape.leaf(Tensor::<f64>::randn(&[1, 2, 3, 3], &mut rng).unwrap());
        let l = output_distillation_loss(&mut tape, &s, &t).unwrap();
        let g = tape.backward(&l).unwrap();
        assert!(g.wrt(&s).is_some());
        assert!(g.wrt(&t).is_none_or(|g| g.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn selection_rules() {
        let a = Tensor::<f64>::full(&[2, 2], 1.0).unwrap();
        let b = Tensor::<f64>::full(&[2, 2], 2.0).unwrap();
        let book = TokenCodebook::new(vec![b.clone(), a.clone(), a.clone()]);
        let c = select_token(&book, &LiteralRenderer, &(), &a).unwrap();
        assert_eq!(c, TokenChoice { index: 1, mse: 0.0 });
        let single = TokenCodebook::new(vec![b.clone()]);
        assert_eq!(select_token(&single, &LiteralRenderer, &(), &a).unwrap().index, 0);
        let empty = TokenCodebook::<Tensor<f64>>::new(vec![]);
        assert!(matches!(select_token(&empty, &LiteralRenderer, &(), &a), Err(Error::Usage(_))));
    }
}
