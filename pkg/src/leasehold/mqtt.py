"""Adapter from the kernel's bus interface onto an external MQTT broker.

The adapter takes a factory returning paho-style clients (``will_set``,
``connect``, ``subscribe``, ``publish``, ``disconnect``, ``on_message``), so the
package itself has no MQTT dependency.  Topic map::

    inbox/<agent>  ->  leasehold/inbox/<agent>
    broadcast      ->  leasehold/broadcast
    audit mirror   ->  leasehold/audit/<inbox/agent | broadcast>

Brokers do not mirror traffic, so every publish is sent twice: once to its
topic and once under ``leasehold/audit/``.  A broker-fired last will only reaches
``leasehold/broadcast``; audit taps therefore also listen there for wills.
Redelivered messages (QoS 1) are dropped by msg_id.
"""
from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Any, Callable

from .bus import (AUDIT, BROADCAST, DEFAULT_QUEUE_LIMIT, Envelope, MalformedEnvelope,
                  NotConnected, Receipt, Subscription, WillRegistration, inbox_owner)

PREFIX = "leasehold/"
AUDIT_PREFIX = "leasehold/audit/"
QOS = 1
DEDUP_WINDOW = 65_536


def to_wire(topic: str) -> str:
    return PREFIX + topic


def from_wire(topic: str) -> str:
    if topic.startswith(AUDIT_PREFIX):
        return topic[len(AUDIT_PREFIX):]
    if not topic.startswith(PREFIX):
        raise ValueError(f"foreign topic {topic!r}")
    return topic[len(PREFIX):]


class _Dedup:
    def __init__(self, window: int = DEDUP_WINDOW):
        self.window = window
        self._seen: OrderedDict[str, None] = OrderedDict()

    def first(self, msg_id: str) -> bool:
        if msg_id in self._seen:
            return False
        self._seen[msg_id] = None
        if len(self._seen) > self.window:
            self._seen.popitem(last=False)
        return True


class _Feed:
    """One local subscription fed by a client's message callback."""

    def __init__(self, sub: Subscription, wills_only_on: str | None = None):
        self.sub = sub
        self.dedup = _Dedup()
        self.wills_only_on = wills_only_on

    def offer(self, wire_topic: str, e: Envelope, timeout: float) -> None:
        if self.wills_only_on is not None and wire_topic == self.wills_only_on and e.kind != "will":
            return
        if self.dedup.first(e.msg_id):
            self.sub._offer(e, timeout)


class MqttBus:
    def __init__(self, client_factory: Callable[[str], Any], host: str = "localhost",
                 port: int = 1883, keepalive: int = 30, queue_limit: int = DEFAULT_QUEUE_LIMIT,
                 publish_timeout: float = 1.0):
        self.factory = client_factory
        self.host, self.port, self.keepalive = host, port, keepalive
        self.queue_limit = queue_limit
        self.publish_timeout = publish_timeout
        self._lock = threading.RLock()
        self._clients: dict[str, Any] = {}
        self._feeds: dict[str, dict[str, list[_Feed]]] = {}
        self._seq = 0

    # -- connections -----------------------------------------------------

    def _client(self, agent: str) -> Any:
        c = self.factory(agent)
        c.on_message = lambda _c, _u, msg, agent=agent: self._on_message(agent, msg)
        return c

    def connect(self, agent: str) -> int:
        with self._lock:
            if agent not in self._clients:
                c = self._client(agent)
                c.connect(self.host, self.port, self.keepalive)
                self._clients[agent] = c
                self._feeds[agent] = {}
            return 1

    def is_connected(self, agent: str) -> bool:
        return agent in self._clients

    def _require(self, agent: str) -> Any:
        try:
            return self._clients[agent]
        except KeyError:
            raise NotConnected(agent) from None

    def register_will(self, w: WillRegistration) -> None:
        if w.will.kind != "will":
            raise MalformedEnvelope("will registration needs an envelope of kind 'will'")
        w.will.validate()
        with self._lock:
            old = self._require(w.agent)
            # MQTT fixes the will at connect time: reconnect with it and resubscribe
            old.disconnect()
            c = self._client(w.agent)
            c.will_set(to_wire(BROADCAST), w.will.encode(), qos=QOS)
            c.connect(self.host, self.port, self.keepalive)
            for wire in self._feeds[w.agent]:
                c.subscribe(wire, qos=QOS)
            self._clients[w.agent] = c

    def disconnect(self, agent: str, clean: bool = True) -> None:
        with self._lock:
            c = self._clients.pop(agent, None)
            feeds = self._feeds.pop(agent, {})
            for lst in feeds.values():
                for f in lst:
                    f.sub.closed = True
            if c is None:
                return None
            if clean:
                c.disconnect()
            else:
                # drop the socket without DISCONNECT so the broker fires the will
                sock = c.socket() if hasattr(c, "socket") else None
                if sock is not None:
                    sock.close()
        return None

    # -- pub/sub ---------------------------------------------------------

    def publish(self, e: Envelope) -> Receipt:
        e.validate()
        if e.kind == "will":
            raise MalformedEnvelope("wills are published by the broker, not by agents")
        with self._lock:
            c = self._require(e.sender)
            raw = e.encode()
            c.publish(to_wire(e.topic), raw, qos=QOS)
            c.publish(AUDIT_PREFIX + e.topic, raw, qos=QOS)
            self._seq += 1
            return Receipt(e.msg_id, self._seq, -1)  # fan-out is unknown to the client

    def _add_feed(self, agent: str, wire: str, feed: _Feed) -> None:
        c = self._require(agent)
        lst = self._feeds[agent].setdefault(wire, [])
        if not lst:
            c.subscribe(wire, qos=QOS)
        lst.append(feed)

    def subscribe(self, agent: str, topic: str) -> Subscription:
        with self._lock:
            self._require(agent)
            owner = inbox_owner(topic)
            if topic != BROADCAST and owner is None:
                raise ValueError(f"cannot subscribe to {topic!r}; use audit_tap()")
            if owner is not None and owner != agent:
                raise ValueError(f"{agent} may not read {topic}")
            sub = Subscription(agent, topic, self.queue_limit)
            self._add_feed(agent, to_wire(topic), _Feed(sub))
            return sub

    def audit_tap(self, observer: str = "audit") -> Subscription:
        with self._lock:
            self.connect(observer)
            sub = Subscription(observer, AUDIT, self.queue_limit)
            feed = _Feed(sub, wills_only_on=to_wire(BROADCAST))
            self._add_feed(observer, AUDIT_PREFIX + "#", feed)
            self._add_feed(observer, to_wire(BROADCAST), feed)
            return sub

    def close_tap(self, tap: Subscription) -> None:
        self.disconnect(tap.owner, clean=True)

    def _on_message(self, agent: str, msg: Any) -> None:
        try:
            e = Envelope.decode(msg.payload)
        except (ValueError, KeyError, TypeError):
            return  # not ours; a broker topic can carry foreign traffic
        with self._lock:
            feeds = self._feeds.get(agent, {})
            wire = msg.topic
            matched = [f for pat, lst in feeds.items() if _matches(pat, wire) for f in lst]
        for f in matched:
            f.offer(wire, e, self.publish_timeout)


def _matches(pattern: str, topic: str) -> bool:
    if pattern.endswith("/#"):
        return topic.startswith(pattern[:-1])
    return pattern == topic
