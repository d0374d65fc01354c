macro_rules! example_test {
    ($name:ident, $test:ident) => {
        mod $name {
            include!(concat!(
                env!("CARGO_MANIFEST_DIR"),
                "/examples/",
                stringify!($name),
                ".rs"
            ));
        }

        #[test]
        fn $test() {
            $name::run_example().expect(concat!(stringify!($name), " example should run"));
        }
    };
}

example_test!(autodiff, autodiff_runs);
example_test!(stiff_integration, stiff_integration_runs);
example_test!(slow_manifold, slow_manifold_runs);
example_test!(enzyme_full, enzyme_full_runs);
example_test!(lifted_vs_full, lifted_vs_full_runs);
example_test!(cstr_reactor, cstr_reactor_runs);
example_test!(custom_model, custom_model_runs);
example_test!(export_and_verify, export_and_verify_runs);
