/**
 * Scripting-side interface to the mpw message-passing library.
 *
 * A deliberately small surface: create/destroy paths, blocking
 * fixed-size and dynamic exchanges, the barrier, per-path tuning, and
 * finalize.  Payloads are byte buffers; anything typed must be
 * serialized by the caller.  Paths are client-side only here: the
 * binding connects out to a core-library endpoint.
 */

import { PathClient, PathOptions } from './path.js';
import { NoSuchPathError, UsageError } from './wire.js';

export { PathClient } from './path.js';
export type { PathOptions } from './path.js';
export {
  BARRIER_TOKEN,
  BarrierError,
  DEFAULT_CHUNK_SIZE,
  MAX_STREAMS,
  MPWError,
  NoSuchPathError,
  OversizeFrameError,
  TransportError,
  UsageError,
  encodeHandshake,
  stripe,
} from './wire.js';

const paths = new Map<number, PathClient>();
let nextPathId = 0; // never reused within the process lifetime

function livePath(pathId: number): PathClient {
  const path = paths.get(pathId);
  if (path === undefined) {
    throw new NoSuchPathError(`no such path: ${pathId}`);
  }
  return path;
}

/** Open a path of `streams` connections to a listening core endpoint. */
export async function createPath(
  host: string,
  port: number,
  streams = 1,
  opts: PathOptions = {},
): Promise<number> {
  const pathId = nextPathId++;
  const path = await PathClient.connect(host, port, streams, pathId, opts);
  paths.set(pathId, path);
  return pathId;
}

export function destroyPath(pathId: number): void {
  const path = livePath(pathId);
  path.destroy();
  paths.delete(pathId);
}

export async function sendRecv(
  pathId: number,
  out: Buffer,
  expectedIn: number,
): Promise<Buffer> {
  return livePath(pathId).sendRecv(out, expectedIn);
}

export async function dSendRecv(pathId: number, out: Buffer): Promise<Buffer> {
  return livePath(pathId).dSendRecv(out);
}

export async function barrier(pathId: number): Promise<void> {
  return livePath(pathId).barrier();
}

export type Setting = 'chunk_size' | 'pacing_rate' | 'autotune' | 'window';

/** Change one tunable; later transfers on the path observe it. */
export function configure(
  pathId: number,
  setting: Setting,
  value: number | boolean | null,
): void {
  const path = livePath(pathId);
  switch (setting) {
    case 'chunk_size':
      if (typeof value !== 'number' || !Number.isInteger(value) || value < 1) {
        throw new UsageError(`chunk_size must be a positive integer, got ${value}`);
      }
      path.chunkSize = value;
      break;
    case 'pacing_rate':
      if (value !== null && (typeof value !== 'number' || value <= 0)) {
        throw new UsageError(`pacing_rate must be positive or null, got ${value}`);
      }
      path.pacingRate = value;
      break;
    case 'autotune':
      if (value !== false) {
        // The probe protocol lives in the core library; the bindings
        // never initiate it, so enabling the flag would desync peers.
        throw new UsageError('autotuning is not available from the bindings');
      }
      path.autotune = false;
      break;
    case 'window':
      // Node exposes no portable socket-buffer control; reject rather
      // than silently diverge from the core's behavior.
      throw new UsageError('window tuning is not available from the bindings');
    default:
      throw new UsageError(`unknown setting ${String(setting)}`);
  }
}

/** Destroy every path; stale ids raise afterwards, never crash. */
export function finalize(): void {
  for (const path of paths.values()) {
    path.destroy();
  }
  paths.clear();
}

export function livePathCount(): number {
  return paths.size;
}
