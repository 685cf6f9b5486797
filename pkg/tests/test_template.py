import numpy as np
import pytest

from mvanon.errors import ParseError
from mvanon.template import (LANDMARK_NAMES, N_PROBES, TemplateMesh, load_template, make_texture, sample_surface,
                             save_template)


def test_template_structure(template):
    assert set(LANDMARK_NAMES) <= set(template.landmarks)
    assert len(template.probe_vertices) == N_PROBES
    assert np.isin(template.probe_vertices, template.face_submesh).all()
    assert len(np.unique(template.probe_vertices)) == N_PROBES
    assert np.allclose(np.linalg.norm(template.normals, axis=1), 1.0)


def test_template_orientation(template):
    """+x right, +y forward, +z up: the nose is in front and the person's
    own left side lies at negative x."""
    nose, le, re = (template.vertices[template.landmarks[n]] for n in ("nose", "left_eye", "right_eye"))
    lear, rear = (template.vertices[template.landmarks[n]] for n in ("left_ear", "right_ear"))
    assert nose[1] > max(le[1], re[1]) > 0
    assert le[0] < 0 < re[0] and lear[0] < 0 < rear[0]
    # outward normals on a closed head
    assert np.mean(np.sum(template.normals * template.vertices, axis=1) > 0) > 0.95


def test_face_triangles_index_submesh(template):
    tri = template.face_triangles()
    assert tri.min() >= 0 and tri.max() < len(template.face_submesh)
    assert len(tri) > 100


def test_probes_spread_over_face(template):
    p = template.vertices[template.probe_vertices]
    d = np.linalg.norm(p[:, None] - p[None], axis=2)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 0.01


def test_save_load_roundtrip(template, tmp_path):
    save_template(template, tmp_path / "head.obj")
    back = load_template(tmp_path / "head.obj")
    assert np.allclose(back.vertices, template.vertices, atol=1e-9)
    assert np.array_equal(back.triangles, template.triangles)
    assert np.allclose(back.uvs, template.uvs, atol=1e-9)
    assert back.landmarks == template.landmarks
    assert np.array_equal(back.face_submesh, template.face_submesh)
    assert np.array_equal(back.probe_vertices, template.probe_vertices)


def test_load_reports_line(template, tmp_path):
    save_template(template, tmp_path / "head.obj")
    lines = (tmp_path / "head.obj").read_text().splitlines()
    lines[3] = "v 0.1 oops 0.2"
    (tmp_path / "head.obj").write_text("\n".join(lines))
    with pytest.raises(ParseError) as exc:
        load_template(tmp_path / "head.obj")
    assert exc.value.line == 4


def test_bad_probe_count_rejected(template):
    with pytest.raises(ValueError):
        TemplateMesh(template.vertices, template.triangles, template.uvs, template.landmarks,
                     template.face_submesh, template.probe_vertices[:5])


@pytest.mark.parametrize("kind", ["masked", "maskless"])
@pytest.mark.parametrize("variant", [0, 3])
def test_make_texture(template, kind, variant):
    img = make_texture(kind, variant, template, size=128)
    assert img.shape == (128, 128, 3) and img.dtype == np.uint8
    assert img.std() > 5


def test_textures_differ(template):
    assert not np.array_equal(make_texture("masked", 0, template), make_texture("maskless", 0, template))
    assert not np.array_equal(make_texture("masked", 0, template), make_texture("masked", 1, template))


def test_unknown_texture_kind(template):
    with pytest.raises(ValueError):
        make_texture("glitter", 0, template)


def test_sample_surface_on_mesh(template, rng):
    pts = sample_surface(template.vertices, template.triangles, 500, rng)
    assert pts.shape == (500, 3)
    # every sample lies within the head's bounding box
    lo, hi = template.vertices.min(axis=0), template.vertices.max(axis=0)
    assert np.all(pts >= lo - 1e-12) and np.all(pts <= hi + 1e-12)
