//! How quickly an EMA teacher catches up with a frozen student.

use ssbver::backbone::{Encoder, StudentTeacherPair, TinyEncoder, TinyEncoderConfig};
use ssbver::ssl_head::{Projector, ProjectorConfig};

fn main() -> ssbver::Result<()> {
    for lambda in [0.9, 0.99, 0.9995] {
        let student = TinyEncoder::new(TinyEncoderConfig::default())?;
        let projector = Projector::new(student.dim(), ProjectorConfig::default(), 0)?;
        let mut pair = StudentTeacherPair::new(student, projector, lambda)?;
        // Move the student away from its teacher copy, then hold it still.
        for (_, t) in pair.student.params_mut().iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        let gap = |p: &StudentTeacherPair<TinyEncoder>| p.teacher.params().max_abs_diff(p.student.params()).unwrap();
        let start = gap(&pair);
        let mut steps = 0;
        while gap(&pair) > 1e-6 * start {
            pair.ema_update()?;
            steps += 1;
        }
        let bound = (1e-6f64.ln() / lambda.ln()).ceil();
        println!("lambda {lambda}: gap below 1e-6 of its start after {steps} updates (bound {bound})");
    }
    Ok(())
}
