//! Combine per-instance class distributions into one group posterior.

use multidet::classify::ClassProbs;
use multidet::fusion::joint_probability;

fn show(name: &str, p: &ClassProbs) {
    let v: Vec<String> = p.as_slice().iter().map(|x| format!("{x:.4}")).collect();
    println!("{name:<10} [{}]  argmax {}", v.join(", "), p.argmax());
}

fn main() -> anyhow::Result<()> {
    let a = ClassProbs::new(vec![0.8, 0.2])?;
    show("a", &a);
    show("a * a", &joint_probability(&[a.clone(), a])?);

    // Two confident views outvote one confused view.
    let views = [
        ClassProbs::new(vec![0.6, 0.3, 0.1])?,
        ClassProbs::new(vec![0.2, 0.7, 0.1])?,
        ClassProbs::new(vec![0.5, 0.25, 0.25])?,
    ];
    for (i, v) in views.iter().enumerate() {
        show(&format!("view {i}"), v);
    }
    show("joint", &joint_probability(&views)?);

    // Wide distributions are fused in log space and do not underflow.
    let c = 1000;
    let mut peaked = vec![0.4 / (c - 1) as f64; c];
    peaked[692] = 0.6;
    let p = ClassProbs::new(peaked)?;
    let j = joint_probability(&vec![p; 8])?;
    println!("8 x 1000 classes: joint max {:.6} at {}", j.max(), j.argmax());

    match joint_probability(&[ClassProbs::one_hot(3, 0), ClassProbs::one_hot(3, 1)]) {
        Err(e) => println!("disjoint supports: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
