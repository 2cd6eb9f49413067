/**
 * Echo/latency demo: connect to a core-library echo endpoint, measure
 * barrier round trips, then bounce a 1 MiB buffer and report the rate.
 *
 * Start the peer first (from the bindings directory):
 *   python3 tests/echo_server.py --mode barrier-then-echo --streams 2
 * then run with the printed port:
 *   npm run demo -- 127.0.0.1 <port> 2
 */

import { randomBytes } from 'node:crypto';

import { barrier, createPath, dSendRecv, destroyPath, finalize } from './index.js';

async function main(): Promise<number> {
  const [host = '127.0.0.1', portText, streamsText = '2'] = process.argv.slice(2);
  if (!portText) {
    console.error('usage: demo <host> <port> [streams]');
    return 2;
  }
  const port = Number(portText);
  const streams = Number(streamsText);

  const path = await createPath(host, port, streams);
  console.log(`path open: ${host}:${port}, ${streams} streams`);

  await barrier(path);
  console.log('barrier with the peer completed');

  const rounds = 20;
  const ping = Buffer.from('ping');
  const start = process.hrtime.bigint();
  for (let i = 0; i < rounds; i++) {
    await dSendRecv(path, ping);
  }
  const perRound = Number(process.hrtime.bigint() - start) / 1e6 / rounds;
  console.log(`small echo round trip: ${perRound.toFixed(3)} ms over ${rounds} rounds`);

  const payload = randomBytes(1024 * 1024);
  const t0 = process.hrtime.bigint();
  const echoed = await dSendRecv(path, payload);
  const seconds = Number(process.hrtime.bigint() - t0) / 1e9;
  if (!echoed.equals(payload)) {
    console.error('echo mismatch!');
    return 1;
  }
  const rate = payload.length / seconds / (1024 * 1024);
  console.log(`1 MiB echo: ${(seconds * 1000).toFixed(1)} ms (${rate.toFixed(1)} MiB/s round trip)`);

  destroyPath(path);
  finalize();
  return 0;
}

main().then(
  (code) => process.exit(code),
  (err) => {
    console.error(err);
    process.exit(1);
  },
);
