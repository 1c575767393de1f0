//! Builds a small network, evaluates it, and splits it into `f_k` and `g_k`.

use nalgebra::dvector;
use relu_ident::NetworkParams;

fn main() -> relu_ident::Result<()> {
    // layers listed from the input side: M^2, M^1, M^0
    let net = NetworkParams::from_rows(&[
        (vec![vec![1.0, 0.0], vec![1.0, 1.0]], vec![0.0, -1.0]),
        (vec![vec![1.0, -1.0], vec![0.0, 1.0]], vec![0.0, 0.5]),
        (vec![vec![1.0, 2.0]], vec![0.0]),
    ])?;
    println!("architecture {}", net.arch());
    for x in [dvector![0.5, 0.5], dvector![2.0, -1.0], dvector![-3.0, 4.0]] {
        let y = net.forward(&x)?;
        let pattern = net.activation_pattern(&x)?;
        let hidden = net.eval_f_k(1, &x)?;
        let back = net.eval_g_k(1, &hidden)?;
        println!(
            "x = ({:5.2}, {:5.2})  f = {:8.4}  pattern {:?}  g_1(f_1(x)) = {:8.4}",
            x[0],
            x[1],
            y[0],
            pattern.bits(),
            back[0]
        );
    }
    println!("{}", net.to_json());
    Ok(())
}
