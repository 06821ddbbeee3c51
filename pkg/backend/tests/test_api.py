"""
HTTP endpoint tests against the real app with settings overridden per test.
"""
import math

import pytest
from app import app, get_settings
from fastapi.testclient import TestClient
from models import ResultRow
from phantom import generate_phantom_dataset
from result_store import ResultStore


@pytest.fixture
def test_app(tiny_settings):
    """App reading results and datasets from the test's temporary directories."""
    app.dependency_overrides[get_settings] = lambda: tiny_settings
    yield app
    app.dependency_overrides.clear()


@pytest.fixture
def client(test_app):
    """Create test client fixture."""
    return TestClient(test_app)


@pytest.fixture
def stored_rows(tiny_settings):
    """Two rows differing only in normalization."""
    store = ResultStore(tiny_settings.results_path / "results.csv")
    rows = []
    for normalization, value in (("quantile", 0.6), ("linear", 0.55)):
        row = ResultRow(
            train_key="siteA",
            test_key="siteB",
            normalization=normalization,
            topology="nested_dense",
            seed=0,
            dice=value,
            iou=value / (2 - value),
        )
        store.append(row)
        rows.append(row)
    return rows


class TestAPIEndpoints:
    """Endpoint behavior and error mapping."""

    @pytest.mark.integration
    def test_root_endpoint(self, client, tiny_settings):
        """Test liveness check."""
        response = client.get("/")
        assert response.status_code == 200
        assert response.json() == {
            "status": "ok",
            "results_dir": str(tiny_settings.results_path),
        }

    @pytest.mark.integration
    def test_results_empty(self, client):
        """No results file yet."""
        response = client.get("/api/results")
        assert response.status_code == 200
        assert response.json() == []

    @pytest.mark.integration
    def test_results_filtered(self, client, stored_rows):
        """Rows filter by normalization."""
        response = client.get("/api/results", params={"normalization": "linear"})
        assert response.status_code == 200
        data = response.json()
        assert len(data) == 1
        assert data[0]["dice"] == pytest.approx(0.55)

        assert len(client.get("/api/results").json()) == 2

    @pytest.mark.integration
    def test_datasets_listed(self, client, tiny_settings, tiny_profile):
        """Manifests under DATA_DIR are summarized."""
        generate_phantom_dataset(tiny_profile, 2, tiny_settings.DATA_DIR)
        response = client.get("/api/datasets", params={"load": True})
        assert response.status_code == 200
        (summary,) = response.json()
        assert summary["dataset_id"] == "tinyA"
        assert summary["scans"] == 2
        assert summary["slices"] > 0
        assert summary["centers"] == {"tinyA": 2}

    @pytest.mark.integration
    def test_anova(self, client):
        """Groups go to one-way ANOVA."""
        response = client.post(
            "/api/stats/anova",
            json={"groups": {"a": [0.5, 0.6, 0.7], "b": [0.5, 0.6, 0.7]}},
        )
        assert response.status_code == 200
        (result,) = response.json()
        assert result["statistic"] == 0.0
        assert result["p_value"] == pytest.approx(1.0)

    @pytest.mark.integration
    def test_anova_zero_within_variance(self, client):
        """Degenerate groups still serialize to a finite statistic."""
        response = client.post(
            "/api/stats/anova",
            json={"groups": {"a": [0.5, 0.5], "b": [0.7, 0.7]}},
        )
        assert response.status_code == 200
        (result,) = response.json()
        assert math.isfinite(result["statistic"])
        assert result["p_value"] == 0.0
        assert "zero_within_variance" in result["flags"]

    @pytest.mark.integration
    def test_wilcoxon_exact(self, client):
        """Pairs go to the signed-rank test."""
        pairs = [[0.6 + 0.01 * k, 0.5] for k in range(5)]
        response = client.post(
            "/api/stats/wilcoxon", json={"pairs": pairs, "mode": "exact"}
        )
        assert response.status_code == 200
        assert response.json()[0]["p_value"] == pytest.approx(0.0625)

    @pytest.mark.integration
    def test_stats_errors(self, client):
        """Unknown test is 404, unusable input is 422."""
        assert client.post("/api/stats/kruskal", json={}).status_code == 404
        assert client.post("/api/stats/anova", json={}).status_code == 422
        response = client.post(
            "/api/stats/tukey", json={"groups": {"a": [1, 2], "b": [1, 2, 3]}}
        )
        assert response.status_code == 422
        assert "equal group sizes" in response.json()["detail"]

    @pytest.mark.unit
    def test_request_validation(self, client):
        """Schema violations are rejected before any computation."""
        response = client.post(
            "/api/stats/wilcoxon", json={"pairs": [[1, 0]], "mode": "bootstrap"}
        )
        assert response.status_code == 422
        assert client.post("/api/metrics/score", json={"tp": -1}).status_code == 422

    @pytest.mark.unit
    def test_score_endpoint(self, client):
        """Dice and IoU from counts."""
        response = client.post(
            "/api/metrics/score", json={"tp": 2, "fp": 1, "fn": 1, "tn": 10}
        )
        assert response.status_code == 200
        data = response.json()
        assert math.isclose(data["dice"], 2 / 3)
        assert math.isclose(data["iou"], 0.5)

    @pytest.mark.unit
    def test_score_both_empty(self, client):
        """Empty prediction and truth score 1."""
        response = client.post("/api/metrics/score", json={"tn": 4})
        assert response.json() == {"dice": 1.0, "iou": 1.0}
