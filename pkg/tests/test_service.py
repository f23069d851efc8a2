import json

import numpy as np
import pytest
from fastapi.testclient import TestClient

from gavatar.assets import Checkpoint, load_checkpoint
from gavatar.animate import RefinementNet
from gavatar.cloud import init_from_vertices
from gavatar.service import create_app
from gavatar.training import TrainConfig


@pytest.fixture(scope='module')
def app_client(tmp_path_factory):
    from gavatar.fixtures import make_cylinder_body
    body = make_cylinder_body()
    cloud = init_from_vertices(body)
    net = RefinementNet(joint_count=body.joint_count, seed=0)
    ckpt = Checkpoint(cloud=cloud, net=net, config=TrainConfig(), iteration=0)
    app = create_app(ckpt, body, width=48, height=48)
    with TestClient(app) as client:
        yield client, body


def recv_frame(ws):
    header = json.loads(ws.receive_text())
    payload = ws.receive_bytes()
    return header, payload


class TestInfo:
    def test_reports_counts(self, app_client):
        client, body = app_client
        doc = client.get('/info').json()
        assert doc['joints'] == 2
        assert doc['gaussians'] == 128
        assert doc['width'] == 48 and doc['height'] == 48
        assert len(doc['joint_names']) == 2

    def test_409_when_no_checkpoint(self):
        app = create_app(None, None)
        with TestClient(app) as client:
            assert client.get('/info').status_code == 409
            assert client.get('/frame.png').status_code == 409


class TestPose:
    def test_wrong_joint_count_gets_400(self, app_client):
        client, _ = app_client
        resp = client.post('/pose', json={'joints': [[0, 0, 0]]})
        assert resp.status_code == 400
        assert 'expected 2' in resp.json()['error']
        assert 'got 1' in resp.json()['error']

    def test_valid_pose_bumps_seq(self, app_client):
        client, _ = app_client
        s1 = client.post('/pose', json={'joints': [[0, 0, 0], [0, 0, 0.1]]}).json()['seq']
        s2 = client.post('/pose', json={'joints': [[0, 0, 0], [0, 0, 0.2]]}).json()['seq']
        assert s2 == s1 + 1

    def test_invalid_camera_gets_400(self, app_client):
        client, _ = app_client
        resp = client.post('/camera', json={'azimuth_deg': 'wat'})
        assert resp.status_code == 400


class TestFrames:
    def test_frame_png_idempotent(self, app_client):
        client, _ = app_client
        client.post('/pose', json={'joints': [[0, 0, 0], [0, 0, 0.3]]})
        a = client.get('/frame.png')
        b = client.get('/frame.png')
        assert a.status_code == 200
        assert a.content == b.content
        assert a.headers['content-type'] == 'image/png'

    def test_stream_delivers_monotone_seqs(self, app_client):
        client, _ = app_client
        with client.websocket_connect('/stream') as ws:
            header0, _ = recv_frame(ws)
            client.post('/pose', json={'joints': [[0, 0, 0], [0.2, 0, 0]]})
            header1, _ = recv_frame(ws)
            assert header1['seq'] >= header0['seq']
            assert header1['width'] == 48
            assert 'render_ms' in header1

    def test_fifty_mutations_converge_to_latest(self, app_client):
        client, _ = app_client
        rng = np.random.default_rng(5)
        with client.websocket_connect('/stream') as ws:
            recv_frame(ws)  # initial frame
            last_seq = 0
            for _ in range(50):
                joints = rng.uniform(-0.5, 0.5, (2, 3)).tolist()
                last_seq = client.post('/pose', json={'joints': joints}).json()['seq']
            # drain until the newest state is delivered
            while True:
                header, payload = recv_frame(ws)
                if header['seq'] >= last_seq:
                    break
        direct = client.get('/frame.png')
        assert direct.content == payload
