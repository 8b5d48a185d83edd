import pytest

from sectorsphere.cluster import quick_cluster


@pytest.fixture
def make_cluster(tmp_path):
    """Factory for in-process clusters; everything is stopped on teardown."""
    made = []

    def factory(n_nodes, **kwargs):
        cluster = quick_cluster(tmp_path / ("cluster%d" % len(made)), n_nodes, **kwargs)
        made.append(cluster)
        return cluster

    yield factory
    for cluster in made:
        cluster.stop()
