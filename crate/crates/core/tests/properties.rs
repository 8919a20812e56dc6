use std::sync::OnceLock;

use proptest::prelude::*;

use cellmech::elasticity::{self, load_scale, net_force_torque, raw_rigid_modes, stiffness, ElasticSolver};
use cellmech::fem::{self, norm2};
use cellmech::mesh::{generate_cell_dome, Mesh, DOME_BASE_RADIUS, DOME_HEIGHT};
use cellmech::model::{
    convert_surface_units, k_tilde3, k_tilde4, lame, youngs_modulus, BcMode, EcMode, Lame, ModelParams, SurfaceUnit,
};

/// Tetrahedra in the coarsest dome; sizes the generated element fields.
const DOME_TETS: usize = 192;

fn dome() -> &'static Mesh {
    static MESH: OnceLock<Mesh> = OnceLock::new();
    MESH.get_or_init(|| generate_cell_dome(DOME_BASE_RADIUS, DOME_HEIGHT, 0).unwrap())
}

fn lame_field(n: usize) -> impl Strategy<Value = Vec<Lame>> {
    prop::collection::vec((0.01f64..10.0, 0.0f64..0.45), n)
        .prop_map(|v| v.into_iter().map(|(e, nu)| lame(e, nu).unwrap()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn surface_unit_conversion_roundtrips(v in -1e6f64..1e6) {
        let there = convert_surface_units(v, SurfaceUnit::CountPerUm2);
        let back = convert_surface_units(there, SurfaceUnit::MicromolPerDm2);
        prop_assert!((back - v).abs() <= 1e-12 * v.abs().max(1e-300));
    }

    #[test]
    fn activation_rates_grow_with_their_inputs(a in 0.0f64..1e7, b in 0.0f64..1e7, x in 0.0f64..2.0, y in 0.0f64..2.0) {
        let p = ModelParams::default();
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(k_tilde3(lo, &p) <= k_tilde3(hi, &p));
        prop_assert!(k_tilde3(hi, &p) < p.k2 + p.k3);
        let (lo, hi) = (x.min(y), x.max(y));
        prop_assert!(k_tilde4(lo, &p) <= k_tilde4(hi, &p));
        prop_assert!(youngs_modulus(lo, EcMode::Coupled, &p) <= youngs_modulus(hi, EcMode::Coupled, &p));
        prop_assert!(youngs_modulus(lo, EcMode::Coupled, &p) >= p.k7);
        prop_assert_eq!(youngs_modulus(lo, EcMode::Constant(0.6), &p), 0.6);
    }

    #[test]
    fn lame_constants_recover_youngs_modulus(e in 1e-3f64..1e7, nu in -0.9f64..0.49) {
        let l = lame(e, nu).unwrap();
        let back = l.mu * (3.0 * l.lambda + 2.0 * l.mu) / (l.lambda + l.mu);
        prop_assert!((back - e).abs() <= 1e-10 * e);
        let nu_back = l.lambda / (2.0 * (l.lambda + l.mu));
        prop_assert!((nu_back - nu).abs() <= 1e-10);
    }

    #[test]
    fn stiffness_is_linear_in_lame_constants(
        l1 in lame_field(DOME_TETS),
        l2 in lame_field(DOME_TETS),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let mesh = dome();
        prop_assert_eq!(mesh.n_tets(), DOME_TETS);
        let mixed: Vec<Lame> = l1
            .iter()
            .zip(&l2)
            .map(|(x, y)| Lame { lambda: a * x.lambda + b * y.lambda, mu: a * x.mu + b * y.mu })
            .collect();
        let k = stiffness(mesh, &mixed);
        let (k1, k2) = (stiffness(mesh, &l1), stiffness(mesh, &l2));
        let scale = k1.max_abs().max(k2.max_abs());
        for i in 0..k.nrows() {
            let (cols, vals) = k.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                let expect = a * k1.get(i, j) + b * k2.get(i, j);
                prop_assert!((v - expect).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn rigid_motions_carry_no_elastic_energy(l in lame_field(DOME_TETS)) {
        let mesh = dome();
        prop_assert_eq!(mesh.n_tets(), DOME_TETS);
        let k = stiffness(mesh, &l);
        let scale = k.max_abs();
        for r in raw_rigid_modes(mesh, &mesh.centroid(), &[0, 1, 2], &[0, 1, 2]) {
            let kr = k.mul_vec(&r);
            prop_assert!(norm2(&kr) <= 1e-10 * scale * norm2(&r));
        }
    }

    #[test]
    fn projected_traction_has_no_net_force_or_torque(
        base in 0.0f64..5.0,
        coeffs in prop::collection::vec(-1.0f64..1.0, 4),
        k6 in 0.01f64..10.0,
    ) {
        let mesh = dome();
        let solver = ElasticSolver::new(mesh, BcMode::PureTraction, None, 1e-10).unwrap();
        // smooth but asymmetric membrane field
        let field: Vec<f64> = mesh
            .surface_to_bulk()
            .iter()
            .map(|&v| {
                let x = mesh.vertices()[v];
                base + coeffs[0] * x.x + coeffs[1] * x.y * x.z + coeffs[2] * x.z + coeffs[3] * x.x * x.x
            })
            .collect();
        let b = solver.traction_load(&field, k6).unwrap();
        let (f, m) = net_force_torque(mesh, &b);
        let (fs, ms) = load_scale(mesh, &b);
        prop_assert!(f.norm() <= 1e-10 * fs);
        prop_assert!(m.norm() <= 1e-10 * ms);
    }

    #[test]
    fn scalar_assembly_is_linear_and_conserves_volume(c in prop::collection::vec(0.1f64..10.0, DOME_TETS), s in 0.1f64..10.0) {
        let mesh = dome();
        prop_assert_eq!(mesh.n_tets(), DOME_TETS);
        let k = fem::bulk_stiffness(mesh, &c);
        let scaled: Vec<f64> = c.iter().map(|v| s * v).collect();
        let ks = fem::bulk_stiffness(mesh, &scaled);
        let ones = vec![1.0; mesh.n_vertices()];
        // constants are in the kernel of every stiffness
        prop_assert!(norm2(&k.mul_vec(&ones)) <= 1e-12 * k.max_abs() * norm2(&ones));
        for i in 0..k.nrows() {
            let (cols, vals) = k.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                prop_assert!((ks.get(i, j) - s * v).abs() <= 1e-12 * ks.max_abs());
            }
        }
        let m = fem::bulk_mass(mesh);
        let total = m.bilinear(&ones, &ones);
        prop_assert!((total - mesh.volume()).abs() <= 1e-12 * mesh.volume());
    }
}

#[test]
fn elastic_solution_is_free_of_rigid_modes() {
    let mesh = dome();
    let mut solver = ElasticSolver::new(mesh, BcMode::PureTraction, None, 1e-10).unwrap();
    let l = vec![lame(0.6, 0.3).unwrap(); mesh.n_tets()];
    let rho: Vec<f64> = mesh
        .surface_to_bulk()
        .iter()
        .map(|&v| 1.0 + 0.3 * mesh.vertices()[v].x)
        .collect();
    let u = solver.solve(&l, &rho, 0.1, None).unwrap();
    assert!(u.report.converged);
    assert!(solver.constraint_residual(&u.u.values) <= 1e-10);
    let s = elasticity::stress_summary(mesh, &u.u.values, &l);
    assert_eq!(s.div_u.len(), mesh.n_tets());
}
