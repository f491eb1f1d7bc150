"""
rosbridge (v2 protocol) compatible topic bus:
codec (messages), routing (router), in-process transport (loopback),
WebSocket client (client) and server (websocket).
"""
