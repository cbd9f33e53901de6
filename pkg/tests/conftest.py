import hashlib

import pytest

from ccsim.policy import policy_from_dict

LAYER_A = hashlib.sha256(b"layer-a").hexdigest()
LAYER_B = hashlib.sha256(b"layer-b").hexdigest()
LAYER_C = hashlib.sha256(b"layer-c").hexdigest()
NGINX = ["/usr/bin/nginx", "-g", "daemon off;"]


def web_policy_dict(**flags) -> dict:
    return {
        "version": 1,
        "containers": [
            {
                "id": "web",
                "layers": [LAYER_A, LAYER_B],
                "command": NGINX,
                "env_rules": [
                    {"pattern": "PATH=/usr/bin:/bin", "strategy": "literal"},
                    {"pattern": "PORT=[0-9]{2,5}", "strategy": "regex"},
                ],
                "working_dir": "/",
                "mounts": [{"source": "/run/secrets/[a-z]+", "destination": "/etc/secrets",
                            "type": "bind", "options": ["ro"]}],
                "exec_processes": [{"command": ["/bin/cat", "/etc/hosts"], "env_rules": [], "working_dir": "/"}],
                "signals": [15],
            },
            {
                "id": "sidecar",
                "layers": [LAYER_A, LAYER_C],
                "command": ["/bin/sidecar"],
                "working_dir": "/",
            },
        ],
        "external_processes": [{"command": ["/sbin/healthcheck"], "env_rules": [], "working_dir": "/"}],
        "flags": flags,
    }


WEB_CREATE = {
    "container_id": "c1", "overlay_id": "o1", "command": NGINX,
    "env": ["PATH=/usr/bin:/bin", "PORT=8080"], "working_dir": "/",
    "mounts": [{"source": "/run/secrets/tls", "destination": "/etc/secrets", "type": "bind", "options": ["ro"]}],
}


@pytest.fixture
def web_policy():
    return policy_from_dict(web_policy_dict())
