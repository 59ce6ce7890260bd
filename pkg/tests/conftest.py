import pytest

from evodial import default_ontology, default_template_text, parse_template


@pytest.fixture(scope="session")
def ontology():
    return default_ontology()


@pytest.fixture(scope="session")
def restaurant_ast():
    return parse_template(default_template_text())
