//! Line-oriented correction loop behind `causalseg intervene`.

use std::io::{BufRead, Write};

use causalseg::metrics::EvalRecord;
use causalseg::model::{argmax_masks, FiLMParams, SegModel};
use causalseg::reasoner::{grammar_help, parse_command, FilmPredictor};
use causalseg::synthgen::{corrupt_for_intervention, CorruptionKind, Dataset, Sample};

use crate::Result;

const GLYPHS: &[u8] = b".#o+x*%@";
const COLORS: &[&str] = &["", "\x1b[31m", "\x1b[32m", "\x1b[34m", "\x1b[33m", "\x1b[35m", "\x1b[36m", "\x1b[37m"];

/// Test samples of `domain`, which may be an OOD split or the source domain.
pub fn domain_samples(data: &Dataset, domain: &str) -> Option<Vec<Sample>> {
    if let Some(s) = data.ood_tests.get(domain) {
        return Some(s.clone());
    }
    let s: Vec<Sample> = data.id_test.iter().filter(|s| s.domain == domain).cloned().collect();
    (!s.is_empty()).then_some(s)
}

pub struct Repl<'a> {
    pub model: &'a SegModel,
    pub reasoner: &'a dyn FilmPredictor,
    pub domain: String,
    pub samples: Vec<Sample>,
    pub index: usize,
    pub corruption: Option<(CorruptionKind, f64)>,
    pub color: bool,
}

struct View {
    sample: Sample,
    film: FiLMParams,
    pred: Vec<u8>,
    dice: f64,
}

impl Repl<'_> {
    fn load(&self, index: usize) -> Result<Sample> {
        let s = &self.samples[index % self.samples.len()];
        Ok(match self.corruption {
            Some((k, sev)) => corrupt_for_intervention(s, k, sev)?.0,
            None => s.clone(),
        })
    }

    fn segment(&self, s: &Sample, film: &FiLMParams) -> Result<(Vec<u8>, f64)> {
        let x = s.image_f64();
        let logits = self.model.predict_logits(&self.model.image_batch(&[&x])?, Some(film))?;
        let pred = argmax_masks(&logits).remove(0);
        let k = self.model.config.num_classes;
        let dice = EvalRecord::new(0, &s.domain, s.content_seed, &pred, &s.mask, s.size, k).mean_dice;
        Ok((pred, dice))
    }

    fn view(&self, index: usize) -> Result<View> {
        let sample = self.load(index)?;
        let film = self.model.identity_film();
        let (pred, dice) = self.segment(&sample, &film)?;
        Ok(View { sample, film, pred, dice })
    }

    fn preview(&self, out: &mut impl Write, truth: &[u8], pred: &[u8], size: usize) -> Result<()> {
        let step = size.div_ceil(32).max(1);
        let cell = |m: u8| {
            let g = GLYPHS[m as usize % GLYPHS.len()] as char;
            if self.color && m > 0 {
                format!("{}{g}\x1b[0m", COLORS[m as usize % COLORS.len()])
            } else {
                g.to_string()
            }
        };
        let w = size.div_ceil(step);
        writeln!(out, "{:<w$}   prediction", "truth")?;
        for y in (0..size).step_by(step) {
            let row = |m: &[u8]| (0..size).step_by(step).map(|x| cell(m[y * size + x])).collect::<String>();
            writeln!(out, "{}   {}", row(truth), row(pred))?;
        }
        Ok(())
    }

    fn header(&self, out: &mut impl Write, index: usize, v: &View) -> Result<()> {
        let i = index % self.samples.len();
        match self.corruption {
            Some((k, sev)) => writeln!(out, "sample {}:{i} with {k} at {sev:.2}", self.domain)?,
            None => writeln!(out, "sample {}:{i}", self.domain)?,
        }
        writeln!(out, "dice {:.4}", v.dice)?;
        self.preview(out, &v.sample.mask, &v.pred, v.sample.size)
    }

    /// Reads commands until `:quit` or end of input.
    pub fn run(&self, input: impl BufRead, out: &mut impl Write) -> Result<()> {
        if self.samples.is_empty() {
            writeln!(out, "no samples in {}", self.domain)?;
            return Ok(());
        }
        let k = self.model.config.num_classes;
        let mut index = self.index;
        let mut v = self.view(index)?;
        self.header(out, index, &v)?;
        write!(out, "> ")?;
        out.flush()?;
        for line in input.lines() {
            let line = line?;
            let text = line.trim();
            match text {
                "" => {}
                ":quit" | ":q" => break,
                ":help" => writeln!(out, "{}\n:next  :reset  :help  :quit", grammar_help())?,
                ":next" => {
                    index += 1;
                    v = self.view(index)?;
                    self.header(out, index, &v)?;
                }
                ":reset" => {
                    v = self.view(index)?;
                    writeln!(out, "film reset to identity")?;
                    self.header(out, index, &v)?;
                }
                _ => match parse_command(text, k) {
                    Err(e) => {
                        writeln!(out, "  {text}")?;
                        writeln!(out, "  {}^ {e}", " ".repeat(e.position))?;
                        writeln!(out, "{}", grammar_help())?;
                    }
                    Ok(cmd) => {
                        let film = self.reasoner.predict(&cmd)?;
                        let (pred, dice) = self.segment(&v.sample, &film)?;
                        writeln!(out, "{}: dice {:.4} -> {:.4} ({:+.4})", cmd.canonical(), v.dice, dice, dice - v.dice)?;
                        self.preview(out, &v.sample.mask, &pred, v.sample.size)?;
                        v.film = film;
                        v.pred = pred;
                        v.dice = dice;
                    }
                },
            }
            write!(out, "> ")?;
            out.flush()?;
        }
        writeln!(out)?;
        Ok(())
    }
}
