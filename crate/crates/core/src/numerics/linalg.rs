use nalgebra::{Matrix3, Vector3};

/// SVD of a 3x3 matrix: `m = U diag(sigma) V^T` with `sigma` non-negative and
/// sorted in descending order.
pub fn svd3(m: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v = svd.v_t.expect("v_t requested").transpose();
    let s = svd.singular_values;
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    let u_sorted = Matrix3::from_columns(&order.map(|i| u.column(i).into_owned()));
    let v_sorted = Matrix3::from_columns(&order.map(|i| v.column(i).into_owned()));
    let s_sorted = Vector3::from(order.map(|i| s[i]));
    (u_sorted, s_sorted, v_sorted)
}
