import pytest

from molarscan.graph import export_reference_models, reference_net

from synthetic import synthetic_opg


@pytest.fixture(scope="session")
def classifier16():
    return reference_net("classifier_stub")


@pytest.fixture(scope="session")
def classifier224():
    return reference_net("classifier_stub", input_size=224)


@pytest.fixture(scope="session")
def detector():
    return reference_net("detector_stub")


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory):
    directory = tmp_path_factory.mktemp("models")
    export_reference_models(directory)
    return directory


@pytest.fixture
def opg_one():
    return synthetic_opg()
