/**
 * Wire-level constants and pure helpers shared with the core library.
 *
 * Handshake: 4 bytes "MPWP" | 1 byte version 0x01 | 4 bytes path id (BE)
 * | 2 bytes stream index (BE) | 2 bytes stream count (BE).
 * Dynamic frames carry an 8-byte big-endian length on stream 0 before
 * the striped payload; barriers exchange the fixed token "MPWBBAR1".
 */

export const HANDSHAKE_MAGIC = 'MPWP';
export const HANDSHAKE_VERSION = 0x01;
export const HANDSHAKE_SIZE = 13;
export const BARRIER_TOKEN = Buffer.from('MPWBBAR1', 'ascii');
export const MAX_STREAMS = 256;
export const DEFAULT_CHUNK_SIZE = 8 * 1024 * 1024;
export const DEFAULT_DYNAMIC_CAP = 1024 ** 3;

export class MPWError extends Error {}
export class UsageError extends MPWError {}
export class NoSuchPathError extends MPWError {}
export class TransportError extends MPWError {}
export class BarrierError extends MPWError {}
export class OversizeFrameError extends MPWError {}

export function encodeHandshake(
  pathId: number,
  streamIndex: number,
  streamCount: number,
): Buffer {
  if (streamCount < 1 || streamCount > MAX_STREAMS) {
    throw new UsageError(`stream count out of range: ${streamCount}`);
  }
  if (streamIndex < 0 || streamIndex >= streamCount) {
    throw new UsageError(
      `stream index ${streamIndex} outside count ${streamCount}`,
    );
  }
  const buf = Buffer.alloc(HANDSHAKE_SIZE);
  buf.write(HANDSHAKE_MAGIC, 0, 'ascii');
  buf.writeUInt8(HANDSHAKE_VERSION, 4);
  buf.writeUInt32BE(pathId >>> 0, 5);
  buf.writeUInt16BE(streamIndex, 9);
  buf.writeUInt16BE(streamCount, 11);
  return buf;
}

/**
 * Split totalLen bytes evenly over streamCount streams: the first
 * (totalLen mod streamCount) segments carry one extra byte.
 */
export function stripe(totalLen: number, streamCount: number): number[] {
  if (streamCount < 1) {
    throw new UsageError(`stream count must be >= 1, got ${streamCount}`);
  }
  if (totalLen < 0) {
    throw new UsageError(`negative message length: ${totalLen}`);
  }
  const base = Math.floor(totalLen / streamCount);
  const extra = totalLen % streamCount;
  const lengths = new Array<number>(streamCount);
  for (let i = 0; i < streamCount; i++) {
    lengths[i] = i < extra ? base + 1 : base;
  }
  return lengths;
}

export function encodeFrameLength(n: number): Buffer {
  const buf = Buffer.alloc(8);
  buf.writeBigUInt64BE(BigInt(n));
  return buf;
}

export function decodeFrameLength(buf: Buffer): number {
  const big = buf.readBigUInt64BE();
  if (big > BigInt(Number.MAX_SAFE_INTEGER)) {
    throw new OversizeFrameError(`frame length ${big} is not addressable`);
  }
  return Number(big);
}
