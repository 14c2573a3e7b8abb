use pyo3::ffi::c_str;
use pyo3::prelude::*;

fn with_module<F: FnOnce(Python<'_>)>(f: F) {
    use duplex_forge::duplex_forge;
    pyo3::append_to_inittab!(duplex_forge);
    Python::initialize();
    Python::attach(f);
}

#[test]
fn module_exposes_signal_and_config_helpers() {
    with_module(|py| {
        let code = c_str!(
            r#"
import json
import duplex_forge as df

assert df.stft_shape(17440) == (273, 129)
clip = df.AudioClip([0.1 * ((i * 37) % 11 - 5) for i in range(1000)])
back = df.stft_round_trip(clip)
assert len(back) == len(clip)
assert max(abs(a - b) for a, b in zip(back.samples, clip.samples)) < 1e-9
assert df.si_sdr(clip, clip) == 100.0

cfg = json.loads(df.normalize_config("{}"))
assert cfg["model"]["bins"] == 129
try:
    df.normalize_config('{"bogus": 1}')
except df.ConfigError as e:
    assert "bogus" in str(e)
else:
    raise AssertionError("unknown key accepted")
"#
        );
        py.run(code, None, None).unwrap();
    });
}
