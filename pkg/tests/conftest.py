import pytest

from gradspace.models import init_sae, init_vae
from gradspace.pipelines import SaeSettings, train_sae_on_images
from gradspace.synthetic import image_set
from gradspace.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_sae():
    m = init_sae(6, 4, seed=3)
    # non-zero biases exercise every gradient path
    r = make_rng(5)
    return m.with_params({"enc_b": r.normal(0, 0.5, 4), "dec_b": r.normal(0, 0.5, 6)})


@pytest.fixture
def small_vae():
    m = init_vae(5, 4, 3, seed=3)
    r = make_rng(6)
    return m.with_params({k: r.normal(0, 0.5, getattr(m, k).shape)
                          for k in ("enc_b", "mu_b", "lv_b", "dec_b")})


@pytest.fixture(scope="session")
def trained_sae():
    """SAE trained on 2,000 whitened 8x8 patches from 5 synthetic images."""
    images = image_set("natural", 5, seed=100, size=32)
    model, zca, report = train_sae_on_images(images, SaeSettings(patches_per_image=400), seed=0)
    return model, zca, report


_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "FAIL"
    if _ACCEPTANCE.get(number, ("PASS",))[0] == "FAIL":
        return
    _ACCEPTANCE[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"[{status}] {number}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
