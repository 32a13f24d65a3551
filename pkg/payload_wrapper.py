import json

from instapbm.trainer_eval import jsonable


class PayloadWrapper:
    """ Result envelope printed by every CLI command. """

    def __init__(self):
        pass

    def _envelope(self, status, payload, message):
        if payload is None:
            data = []
        elif isinstance(payload, list) is True:
            data = payload
        else:
            data = [payload]

        result = {
            "status": status,
            "hasErrors": False,
            "message": message,
            "length": len(data),
            "payload": jsonable(data),
        }
        return result

    def success(self, payload=None, message=''):
        return self._envelope('success', payload, message)

    def error(self, message='', kind=None):
        result = {
            "status": 'error',
            "hasErrors": True,
            "message": str(message),
            "length": -1,
            "payload": [],
        }
        if kind is not None:
            result["errorType"] = kind
        return result

    def dumps(self, result):
        return json.dumps(result, indent=2, sort_keys=True)
